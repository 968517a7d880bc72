"""Vote ensembles and the true-positive / true-negative bound ensembles.

``vote`` fuses member masks by a per-voxel threshold (k of n). The
bound ensembles need the reference mask at build time and are
diagnostic: ``oracle_tp`` keeps exactly the members' true positives (so
it cannot contain a false positive) and ``oracle_tn`` keeps exactly
their true negatives (so it cannot contain a false negative). Any
fusion of the same members is bounded by them, which makes their scores
empirical performance ceilings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .overlap import check_same_geometry
from .volume import TISSUE_LABELS, BinaryMask, LabelVolume

__all__ = [
    "EnsembleSpec",
    "VoteConflictReport",
    "parse_ensemble_spec",
    "vote",
    "oracle_tp",
    "oracle_tn",
    "vote_labels",
    "build_ensemble_mask",
]

ENSEMBLE_KINDS = ("vote", "oracle_tp", "oracle_tn")


@dataclass(frozen=True)
class EnsembleSpec:
    """Declarative ensemble description: kind, members, vote threshold."""

    kind: str
    members: tuple[str, ...]
    k: int | None = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in ENSEMBLE_KINDS:
            raise ValueError(f"ensemble kind must be one of {ENSEMBLE_KINDS}, got {self.kind!r}")
        if len(self.members) < 1:
            raise ValueError("an ensemble needs at least one member model")
        if self.kind == "vote":
            if self.k is None or not (1 <= self.k <= len(self.members)):
                raise ValueError(
                    f"vote threshold k={self.k} outside 1..{len(self.members)}"
                )
        elif self.k is not None:
            raise ValueError(f"{self.kind} ensembles take no threshold")
        if not self.name:
            object.__setattr__(self, "name", self.default_name())

    def default_name(self) -> str:
        if self.kind == "vote":
            return f"vote:k={self.k}"
        return "oracle:tp" if self.kind == "oracle_tp" else "oracle:tn"

    @property
    def requires_ground_truth(self) -> bool:
        return self.kind != "vote"

    @property
    def is_diagnostic(self) -> bool:
        """Bound ensembles are built from the reference mask and must
        never compete on a leaderboard."""
        return self.kind != "vote"


def parse_ensemble_spec(text: str, members: Sequence[str], name: str = "") -> EnsembleSpec:
    """Parse "vote:k=4", "oracle:tp" or "oracle:tn" plus a member list."""
    t = text.strip().lower()
    if t.startswith("vote:"):
        arg = t[len("vote:"):]
        if not arg.startswith("k="):
            raise ValueError(f"vote spec must look like 'vote:k=4', got {text!r}")
        try:
            k = int(arg[2:])
        except ValueError as exc:
            raise ValueError(f"bad vote threshold in {text!r}") from exc
        return EnsembleSpec(kind="vote", members=tuple(members), k=k, name=name)
    if t == "oracle:tp":
        return EnsembleSpec(kind="oracle_tp", members=tuple(members), name=name)
    if t == "oracle:tn":
        return EnsembleSpec(kind="oracle_tn", members=tuple(members), name=name)
    raise ValueError(f"unknown ensemble spec {text!r}; expected vote:k=N, oracle:tp or oracle:tn")


def _check_members(masks: Sequence[BinaryMask]) -> None:
    if not masks:
        raise ValueError("ensemble needs at least one member mask")
    for m in masks[1:]:
        check_same_geometry(masks[0], m)
        if m.tissue != masks[0].tissue:
            raise ValueError(f"member tissue mismatch: {m.tissue} vs {masks[0].tissue}")


def vote(members: Sequence[BinaryMask], k: int) -> BinaryMask:
    """Voxel true iff at least k member masks are true."""
    _check_members(members)
    if not 1 <= k <= len(members):
        raise ValueError(f"vote threshold k={k} outside 1..{len(members)}")
    counts = np.zeros(members[0].dims, dtype=np.int32)
    for m in members:
        counts += m.voxels
    return BinaryMask(counts >= k, members[0].spacing, members[0].tissue)


def oracle_tp(members: Sequence[BinaryMask], gt: BinaryMask) -> BinaryMask:
    """Union of the members' true positives: gt ^ (any member).

    Contains no false positives, so every error is a false negative.
    """
    _check_members(list(members) + [gt])
    any_member = np.zeros(gt.dims, dtype=bool)
    for m in members:
        any_member |= m.voxels
    return BinaryMask(gt.voxels & any_member, gt.spacing, gt.tissue)


def oracle_tn(members: Sequence[BinaryMask], gt: BinaryMask) -> BinaryMask:
    """Complement of the union of the members' true negatives.

    Equivalently the intersection over members of (member v gt): it
    contains no false negatives, and its false positives are exactly
    the voxels every member got wrong in the positive direction.
    """
    _check_members(list(members) + [gt])
    out = np.ones(gt.dims, dtype=bool)
    for m in members:
        out &= m.voxels | gt.voxels
    return BinaryMask(out, gt.spacing, gt.tissue)


@dataclass(frozen=True)
class VoteConflictReport:
    """Voxels where several tissues independently reached the threshold."""

    conflict_voxels: int
    resolved_by_count: int
    resolved_by_code: int


def vote_labels(members: Sequence[LabelVolume], k: int) -> tuple[LabelVolume, VoteConflictReport]:
    """Per-tissue vote over label volumes, recomposed to one label map.

    Voting runs independently per tissue; where a voxel reaches the
    threshold for several tissues the highest vote count wins, ties go
    to the lowest tissue code, and the incidence is reported.
    """
    if not members:
        raise ValueError("ensemble needs at least one member volume")
    dims = members[0].dims
    spacing = members[0].spacing
    for m in members[1:]:
        if m.dims != dims:
            raise ValueError(f"member shape mismatch: {m.dims} vs {dims}")
        if not m.spacing.isclose(spacing):
            raise ValueError(
                f"member spacing mismatch: {m.spacing.to_tuple()} vs {spacing.to_tuple()}"
            )
    if not 1 <= k <= len(members):
        raise ValueError(f"vote threshold k={k} outside 1..{len(members)}")

    tissues = sorted(TISSUE_LABELS)
    counts = np.zeros((len(tissues),) + dims, dtype=np.int32)
    for m in members:
        for ti, tissue in enumerate(tissues):
            counts[ti] += m.voxels == tissue
    wins = counts >= k
    n_wins = wins.sum(axis=0)
    conflicts = int(np.count_nonzero(n_wins > 1))

    # highest vote count among winning tissues; ties -> lowest code
    masked_counts = np.where(wins, counts, -1)
    best_index = masked_counts.argmax(axis=0)  # argmax takes the first (lowest code) on ties
    labels = np.where(n_wins > 0, np.asarray(tissues, dtype=np.uint8)[best_index], 0)

    resolved_by_code = 0
    if conflicts:
        conflict_mask = n_wins > 1
        top = masked_counts.max(axis=0)
        ties = (masked_counts == top[None]).sum(axis=0)
        resolved_by_code = int(np.count_nonzero(conflict_mask & (ties > 1)))
    report = VoteConflictReport(
        conflict_voxels=conflicts,
        resolved_by_count=conflicts - resolved_by_code,
        resolved_by_code=resolved_by_code,
    )
    return LabelVolume(labels.astype(np.uint8), spacing, members[0].through_plane_axis), report


def build_ensemble_mask(
    spec: EnsembleSpec, member_masks: Mapping[str, BinaryMask], gt: BinaryMask | None
) -> BinaryMask:
    """Materialize one ensemble mask for a single tissue."""
    missing = [m for m in spec.members if m not in member_masks]
    if missing:
        raise ValueError(f"ensemble {spec.name}: missing member masks {missing}")
    masks = [member_masks[m] for m in spec.members]
    if spec.kind == "vote":
        return vote(masks, spec.k)
    if gt is None:
        raise ValueError(f"ensemble {spec.name} requires the reference mask")
    return oracle_tp(masks, gt) if spec.kind == "oracle_tp" else oracle_tn(masks, gt)
