#!/usr/bin/env python3
"""Embedding-strength calibration sweep for the wmbench watermark.

Embeds a random message into a synthetic corpus at each candidate strength,
exports to 8 bits and decodes. The recommended strength is the smallest one
that decodes every image exactly while keeping the mean PSNR at or above the
floor.
"""

import argparse
import json
import sys
import time
from typing import Optional

import numpy as np
from tqdm import tqdm

from wmbench._synthetic import synthetic_corpus
from wmbench.core import Rng, hamming, random_message
from wmbench.quality import psnr
from wmbench.watermark import DEFAULT_STRENGTH, WatermarkKey, decode, embed

DEFAULT_GRID = (0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.08, 0.1, 0.15, 0.2)
PSNR_FLOOR = 40.0


class StrengthCalibrator:
    """Sweep embedding strengths over a synthetic corpus."""

    def __init__(self, seed: int = 0, images: int = 32, size: int = 128):
        self.seed = seed
        self.corpus = list(synthetic_corpus(seed, images, size, size))
        self.size = size
        self.results: list[dict] = []

    def log_result(self, strength: float, bit_accuracy: float, exact: float, mean_psnr: float) -> None:
        """Print and record one sweep point."""
        ok = exact == 1.0 and mean_psnr >= PSNR_FLOOR
        status = "PASS" if ok else "FAIL"
        print(
            f"[{status}] strength {strength:<6g} bit accuracy {bit_accuracy:.4f}  "
            f"exact {exact:.3f}  PSNR {mean_psnr:.2f} dB"
        )
        self.results.append(
            {
                "strength": strength,
                "bit_accuracy": bit_accuracy,
                "exact_fraction": exact,
                "psnr": mean_psnr,
                "passes": ok,
            }
        )

    def evaluate(self, strength: float) -> None:
        """Embed, quantize and decode the corpus at one strength."""
        key = WatermarkKey(seed=self.seed, strength=strength)
        rng = Rng(self.seed, f"calibration/{strength:g}")
        accuracies = []
        exact = []
        psnrs = []
        for image in tqdm(self.corpus, desc=f"strength {strength:g}", leave=False, disable=None):
            message = random_message(key.length, rng)
            watermarked = embed(image, message, key).quantized()
            errors = hamming(message, decode(watermarked, key))
            accuracies.append(1.0 - errors / key.length)
            exact.append(errors == 0)
            psnrs.append(psnr(image, watermarked))
        self.log_result(strength, float(np.mean(accuracies)), float(np.mean(exact)), float(np.mean(psnrs)))

    def recommended(self) -> Optional[float]:
        """Smallest passing strength, if any."""
        passing = [r["strength"] for r in self.results if r["passes"]]
        return min(passing) if passing else None

    def run(self, grid: tuple[float, ...]) -> Optional[float]:
        """Sweep the grid and print the recommendation."""
        print("=== wmbench embedding-strength calibration ===")
        print(f"Corpus: {len(self.corpus)} synthetic {self.size}x{self.size} images, seed {self.seed}")
        print(f"Current default strength: {DEFAULT_STRENGTH:g}")
        print()
        for strength in sorted(grid):
            self.evaluate(strength)
        print()
        best = self.recommended()
        if best is None:
            print(f"No strength decodes every image with PSNR >= {PSNR_FLOOR:g} dB")
        else:
            print(f"Recommended strength: {best:g}")
            if best != DEFAULT_STRENGTH:
                print(f"Differs from the current default {DEFAULT_STRENGTH:g}")
        return best

    def generate_report(self, best: Optional[float]) -> dict:
        """Machine-readable sweep results."""
        return {
            "timestamp": time.time(),
            "seed": self.seed,
            "images": len(self.corpus),
            "size": self.size,
            "psnr_floor": PSNR_FLOOR,
            "recommended": best,
            "results": self.results,
        }


def main() -> None:
    """Main calibration entry point."""
    parser = argparse.ArgumentParser(description="Calibrate the watermark embedding strength")
    parser.add_argument("--seed", type=int, default=0, help="Corpus and key seed")
    parser.add_argument("--images", type=int, default=32, help="Number of synthetic images")
    parser.add_argument("--size", type=int, default=128, help="Image side length")
    parser.add_argument(
        "--grid", type=float, nargs="+", default=list(DEFAULT_GRID), help="Candidate strengths"
    )
    parser.add_argument("--report", help="Write a JSON report to this path")
    args = parser.parse_args()

    calibrator = StrengthCalibrator(args.seed, args.images, args.size)
    best = calibrator.run(tuple(args.grid))

    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            json.dump(calibrator.generate_report(best), f, indent=2)
        print(f"Report saved to: {args.report}")

    sys.exit(0 if best is not None else 1)


if __name__ == "__main__":
    main()
