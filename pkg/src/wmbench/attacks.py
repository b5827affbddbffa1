"""Attack identifiers, families and strength grids known to the benchmark."""

from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Any, Iterable, Mapping, Optional

from ._errors import ContractViolation
from .adversarial import EMBEDDING_EPSILONS, SurrogateTrainingSetting
from .distortions import DistortionKind, strength_grid

BASELINE_ATTACK = "none"
BASELINE_STRENGTH = 0.0
TOY_EMBEDDING_ATTACK = "AdvEmbB-Toy"


class AttackFamily(str, Enum):
    """Attack families, keyed by their identifier prefix."""

    DISTORTION = "Dist"
    DISTORTION_COMBO = "DistCom"
    REGENERATION = "Regen"
    RINSING = "Rinse"
    EMBEDDING_GREY_BOX = "AdvEmbG"
    EMBEDDING_BLACK_BOX = "AdvEmbB"
    SURROGATE = "AdvCls"

    @classmethod
    def of(cls, attack_id: str) -> "AttackFamily":
        prefix = attack_id.split("-", 1)[0]
        try:
            return cls(prefix)
        except ValueError:
            raise ContractViolation(f"Attack id {attack_id!r} has no known family prefix") from None


@dataclass(frozen=True)
class AttackSpec:
    """
    One attack of the catalogue.

    ``builtin`` attacks run inside the pipeline; the others are only
    available through ingestion of images attacked elsewhere, and their
    strengths are the reference grid used when an ingestion entry omits them.
    """

    attack_id: str
    family: AttackFamily
    strengths: tuple[float, ...]
    builtin: bool = True
    parameters: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.strengths:
            raise ContractViolation(f"{self.attack_id}: empty strength grid")
        object.__setattr__(self, "strengths", tuple(float(s) for s in self.strengths))
        object.__setattr__(self, "parameters", MappingProxyType(dict(self.parameters)))


_REGENERATION_GRIDS: dict[str, tuple[AttackFamily, tuple[float, ...], dict[str, Any]]] = {
    "Regen-Diff": (AttackFamily.REGENERATION, (40, 80, 120, 160, 200), {"unit": "timestep"}),
    "Regen-DiffP": (AttackFamily.REGENERATION, (40, 80, 120, 160, 200), {"unit": "timestep", "prompted": True}),
    "Regen-VAE": (AttackFamily.REGENERATION, (1, 2, 3, 5, 7), {"unit": "quality"}),
    "Regen-KLVAE": (AttackFamily.REGENERATION, (4, 8, 16, 32), {"unit": "bottleneck"}),
    "Rinse-2xDiff": (AttackFamily.RINSING, (20, 40, 60, 80, 100), {"unit": "timestep", "passes": 2}),
    "Rinse-4xDiff": (AttackFamily.RINSING, (10, 20, 30, 40, 50), {"unit": "timestep", "passes": 4}),
}

_EXTERNAL_ADVERSARIAL = {
    "AdvEmbG-KLVAE8": AttackFamily.EMBEDDING_GREY_BOX,
    "AdvEmbB-RN18": AttackFamily.EMBEDDING_BLACK_BOX,
    "AdvEmbB-CLIP": AttackFamily.EMBEDDING_BLACK_BOX,
    "AdvEmbB-KLVAE16": AttackFamily.EMBEDDING_BLACK_BOX,
    "AdvEmbB-SdxlVAE": AttackFamily.EMBEDDING_BLACK_BOX,
}


def _build_catalogue() -> dict[str, AttackSpec]:
    specs: list[AttackSpec] = []
    for kind in DistortionKind:
        family = AttackFamily.DISTORTION_COMBO if kind.is_combo else AttackFamily.DISTORTION
        specs.append(AttackSpec(kind.attack_id, family, strength_grid(kind).values, parameters={"kind": kind.value}))
    specs.append(
        AttackSpec(
            TOY_EMBEDDING_ATTACK,
            AttackFamily.EMBEDDING_BLACK_BOX,
            EMBEDDING_EPSILONS,
            parameters={"model": "toy-encoder"},
        )
    )
    for setting in SurrogateTrainingSetting:
        specs.append(
            AttackSpec(
                setting.attack_id,
                AttackFamily.SURROGATE,
                EMBEDDING_EPSILONS,
                parameters={"setting": setting.value},
            )
        )
    for attack_id, (family, grid, parameters) in _REGENERATION_GRIDS.items():
        specs.append(AttackSpec(attack_id, family, grid, builtin=False, parameters=parameters))
    for attack_id, family in _EXTERNAL_ADVERSARIAL.items():
        specs.append(AttackSpec(attack_id, family, EMBEDDING_EPSILONS, builtin=False))
    return {spec.attack_id: spec for spec in specs}


_CATALOGUE = MappingProxyType(_build_catalogue())


def attack_catalogue() -> Mapping[str, AttackSpec]:
    """Every known attack keyed by identifier, in leaderboard order."""
    return _CATALOGUE


def get_attack(attack_id: str) -> AttackSpec:
    """
    Look up one attack.

    Raises:
        ContractViolation: If the identifier is unknown.
    """
    try:
        return _CATALOGUE[attack_id]
    except KeyError:
        raise ContractViolation(f"Unknown attack {attack_id!r}") from None


def reference_strengths(attack_id: str) -> Optional[tuple[float, ...]]:
    """Catalogue grid of ``attack_id``, or None for attacks the catalogue does not know."""
    spec = _CATALOGUE.get(attack_id)
    return spec.strengths if spec else None


def severity_order(attack_id: str, strengths: Iterable[float]) -> tuple[float, ...]:
    """
    Distinct strengths from mildest to strongest.

    Attacks whose catalogue grid descends (JPEG quality) sort descending;
    every other attack, known or not, sorts ascending.
    """
    grid = reference_strengths(attack_id)
    descending = grid is not None and len(grid) > 1 and grid[0] > grid[-1]
    return tuple(sorted({float(s) for s in strengths}, reverse=descending))


def strength_label(strength: float) -> str:
    """Directory name of a strength, e.g. ``0.05``, ``90`` or ``0.00784314``."""
    return format(float(strength), ".6g")


def attacked_image_id(attack_id: str, strength: float, image_id: str) -> str:
    """Identifier of one attacked image, as used by per-image external metrics."""
    return f"{attack_id}/{strength_label(strength)}/{image_id}"


def cell_id(attack_id: str, strength: float) -> str:
    return f"{attack_id}/{strength_label(strength)}"


DEFAULT_RADAR_CATEGORIES: Mapping[str, tuple[str, ...]] = MappingProxyType(
    {
        "Distortion Single": tuple(kind.attack_id for kind in DistortionKind if not kind.is_combo),
        "Distortion Combination": tuple(kind.attack_id for kind in DistortionKind if kind.is_combo),
        "Regeneration Single": ("Regen-Diff", "Regen-KLVAE"),
        "Regeneration Rinsing": ("Rinse-2xDiff", "Rinse-4xDiff"),
        "Adv Embedding Grey-box": ("AdvEmbG-KLVAE8",),
        "Adv Embedding Black-box": ("AdvEmbB-CLIP", "AdvEmbB-SdxlVAE", "AdvEmbB-KLVAE16", TOY_EMBEDDING_ATTACK),
        "Adv Surrogate Detector": (SurrogateTrainingSetting.WM1_VS_WM2.attack_id,),
    }
)
