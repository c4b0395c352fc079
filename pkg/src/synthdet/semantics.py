"""Semantic validation of support surfaces and the final placement mask."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from typing import Iterable, Optional

import numpy as np
from scipy import ndimage

from .errors import LabelMapMissing
from .geometry import SupportSurface


@lru_cache(maxsize=None)
def nyud40_classes() -> dict[str, int]:
    """Name -> id table for the 40-class NYU Depth v2 label set."""
    table = {}
    text = resources.files("synthdet.resources").joinpath("nyud40.txt").read_text()
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cid, name = line.split(maxsplit=1)
        table[name] = int(cid)
    return table


def class_ids(names_or_ids: Iterable) -> frozenset[int]:
    table = nyud40_classes()
    out = set()
    for x in names_or_ids:
        if isinstance(x, str) and not x.isdigit():
            key = x.strip().lower().replace(" ", "_")
            if key not in table:
                raise ValueError(f"unknown NYUD40 class name {x!r}")
            out.add(table[key])
        else:
            cid = int(x)
            if not 1 <= cid <= 40:
                raise ValueError(f"NYUD40 class id out of range: {cid}")
            out.add(cid)
    return frozenset(out)


@dataclass(frozen=True)
class SemanticConfig:
    valid_class_ids: frozenset = field(default_factory=lambda: class_ids(("counter", "table", "desk")))
    min_overlap_frac: float = 0.05
    margin_px: int = 5
    # when False every gravity-aligned surface is accepted without labels
    enabled: bool = True

    def __post_init__(self):
        object.__setattr__(self, "valid_class_ids", class_ids(self.valid_class_ids))
        if not self.valid_class_ids:
            raise ValueError("valid_class_ids must not be empty")
        if not 0.0 <= self.min_overlap_frac <= 1.0:
            raise ValueError(f"min_overlap_frac must be in [0, 1], got {self.min_overlap_frac}")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "SemanticConfig":
        d = dict(d or {})
        if "valid_classes" in d:
            d["valid_class_ids"] = d.pop("valid_classes")
        return cls(**d)


def validate_surfaces(surfaces: list[SupportSurface], labels: Optional[np.ndarray],
                      cfg: SemanticConfig = SemanticConfig()) -> list[SupportSurface]:
    """Mark each surface valid when enough of its pixels carry a valid class."""
    if not cfg.enabled:
        return [replace(s, semantic_valid=True) for s in surfaces]
    if labels is None:
        raise LabelMapMissing("semantic validation requires a label map")
    valid_px = np.isin(labels, list(cfg.valid_class_ids))
    out = []
    for s in surfaces:
        if s.support_mask.shape != labels.shape:
            raise ValueError(f"label map {labels.shape} does not match surface mask {s.support_mask.shape}")
        hits = int(np.count_nonzero(valid_px & s.support_mask))
        ok = s.extent_px > 0 and hits / s.extent_px >= cfg.min_overlap_frac
        out.append(replace(s, semantic_valid=bool(ok)))
    return out


def placement_region(surfaces: list[SupportSurface], image_size: tuple[int, int],
                     margin_px: int = 5) -> np.ndarray:
    """Union of valid support masks eroded by ``margin_px`` (square element).

    ``image_size`` is ``(height, width)``. Pixels near the image border erode
    as if the outside were background.
    """
    union = np.zeros(image_size, dtype=bool)
    for s in surfaces:
        if s.semantic_valid:
            union |= s.support_mask
    if margin_px <= 0 or not union.any():
        return union
    se = np.ones((2 * margin_px + 1, 2 * margin_px + 1), dtype=bool)
    return ndimage.binary_erosion(union, structure=se, border_value=0)
