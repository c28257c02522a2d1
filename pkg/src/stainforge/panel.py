"""Marker panel configuration and tile manifest I/O."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Dict, List, Optional


class PanelError(ValueError):
    pass


@dataclass
class AFParams:
    """Linear autofluorescence-subtraction parameters for one channel."""

    lam: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise PanelError(f"lambda must be >= 0, got {self.lam}")


@dataclass
class HierarchyRule:
    """Child marker positivity requires parent marker positivity."""

    child: str
    parent: str


@dataclass
class PanelConfig:
    """Ordered marker list with per-channel AF parameters, normalization
    percentiles and hierarchical gating rules.

    Channel order on disk is ``markers`` followed by the AF channel (when
    present).
    """

    markers: List[str]
    af_channel: Optional[str] = "AF"
    af: Dict[str, AFParams] = field(default_factory=dict)
    q999: Dict[str, float] = field(default_factory=dict)
    hierarchy: List[HierarchyRule] = field(default_factory=list)
    log_base: float = 2.0
    empty_channel: Optional[str] = None

    def __post_init__(self):
        if len(set(self.markers)) != len(self.markers):
            raise PanelError("duplicate marker names in panel")
        for m in self.af:
            if m not in self.markers:
                raise PanelError(f"AF params for unknown marker {m!r}")
        for q in self.q999.values():
            if q <= 0:
                raise PanelError("q999 must be > 0")
        for rule in self.hierarchy:
            if rule.child not in self.markers or rule.parent not in self.markers:
                raise PanelError(f"hierarchy rule references unknown marker: {rule}")
        _check_acyclic(self.hierarchy)

    @property
    def n_markers(self) -> int:
        return len(self.markers)

    @property
    def channel_names(self) -> List[str]:
        names = list(self.markers)
        if self.af_channel:
            names.append(self.af_channel)
        return names

    def af_params(self, marker: str) -> AFParams:
        return self.af.get(marker, AFParams(0.0, 0.0))

    def to_dict(self) -> dict:
        return {
            "markers": list(self.markers),
            "af_channel": self.af_channel,
            "af": {m: {"lambda": p.lam, "b": p.b} for m, p in self.af.items()},
            "q999": dict(self.q999),
            "hierarchy": [{"child": r.child, "parent": r.parent} for r in self.hierarchy],
            "log_base": self.log_base,
            "empty_channel": self.empty_channel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PanelConfig":
        return cls(
            markers=list(d["markers"]),
            af_channel=d.get("af_channel"),
            af={m: AFParams(p["lambda"], p["b"]) for m, p in d.get("af", {}).items()},
            q999={m: float(q) for m, q in d.get("q999", {}).items()},
            hierarchy=[HierarchyRule(r["child"], r["parent"]) for r in d.get("hierarchy", [])],
            log_base=float(d.get("log_base", 2.0)),
            empty_channel=d.get("empty_channel"),
        )

    @classmethod
    def load(cls, path: str) -> "PanelConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path: str):
        """Atomic write: temp file in the same directory, then rename."""
        payload = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        d = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=d, prefix=".panel-", suffix=".json")
        try:
            with os.fdopen(fd, "w") as f:
                f.write(payload)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)


def _check_acyclic(rules: List[HierarchyRule]):
    children = {}
    for r in rules:
        children.setdefault(r.parent, []).append(r.child)
    seen, stack = set(), set()

    def visit(node):
        if node in stack:
            raise PanelError("hierarchy rules contain a cycle")
        if node in seen:
            return
        stack.add(node)
        for c in children.get(node, []):
            visit(c)
        stack.discard(node)
        seen.add(node)

    for r in rules:
        visit(r.parent)


def topological_rules(rules: List[HierarchyRule]) -> List[HierarchyRule]:
    """Order rules so that every parent's own parents are handled first."""
    _check_acyclic(rules)
    by_child = {r.child: r for r in rules}
    ordered: List[HierarchyRule] = []
    done = set()

    def emit(rule: HierarchyRule):
        if rule.child in done:
            return
        parent_rule = by_child.get(rule.parent)
        if parent_rule is not None:
            emit(parent_rule)
        done.add(rule.child)
        ordered.append(rule)

    for r in rules:
        emit(r)
    return ordered


@dataclass
class TileRecord:
    """One manifest row: a registered H&E tile and its mIF counterpart."""

    slide_id: str
    tile_id: str
    x: int
    y: int
    mpp: float
    he_path: str
    mif_path: str
    split: str
    # nucleus instance masks are consumed as inputs; the H&E-side mask is
    # optional and only used by the alignment QC density comparison
    mask_path: str = ""
    he_mask_path: str = ""

    def to_dict(self) -> dict:
        d = {
            "slide_id": self.slide_id,
            "tile_id": self.tile_id,
            "x": self.x,
            "y": self.y,
            "mpp": self.mpp,
            "he_path": self.he_path,
            "mif_path": self.mif_path,
            "split": self.split,
        }
        if self.mask_path:
            d["mask_path"] = self.mask_path
        if self.he_mask_path:
            d["he_mask_path"] = self.he_mask_path
        return d


def load_manifest(path: str) -> List[TileRecord]:
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            records.append(TileRecord(**d))
    ids = [r.tile_id for r in records]
    if len(set(ids)) != len(ids):
        raise PanelError("duplicate tile_id in manifest")
    return records


def save_manifest(records: List[TileRecord], path: str):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_dict()) + "\n")
