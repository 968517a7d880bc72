"""Bundled synthetic phantom dataset.

Real scans and challenge submissions cannot be redistributed, so the
repo ships a deterministic phantom generator instead: 4 subjects x 2
timepoints of disjoint curved-slab "tissues" on the anisotropic grid,
with three synthetic "models":

* ``copygt``  - identical to the reference masks,
* ``eroded``  - sparse dimples cut into the thickness-facing surface
  (sub-voxel mean boundary displacement, calibrated per tissue so the
  mean thickness error stays in the 0.04-0.16 mm regime),
* ``shifted`` - the reference translated one voxel along x.

Everything is integer arithmetic; repeated runs are byte-identical.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .volume import LabelVolume, VoxelSpacing, save_volume

__all__ = ["MODELS", "write_synthetic_dataset", "make_ground_truth", "make_prediction"]

MODELS = ("copygt", "eroded", "shifted")

GRID = (30, 26, 18)
SPACING = VoxelSpacing(0.31, 0.46, 0.70)
SUBJECTS = ("s01", "s02", "s03", "s04")
TIMEPOINTS = ("baseline", "year1")

# dimple lattice period per tissue: every voxel of the +y-facing surface
# with (x + 2z) % m == 0 is removed; larger m = milder erosion
EROSION_MODULI = {1: 14, 2: 8, 3: 6, 4: 8}


def _footprint(nx: int, nz: int, cx: int, cz: int, rx: int, rz: int) -> np.ndarray:
    """Elliptic x/z footprint mask, integer arithmetic."""
    x = np.arange(nx)[:, None]
    z = np.arange(nz)[None, :]
    return (x - cx) ** 2 * rz**2 + (z - cz) ** 2 * rx**2 <= (rx * rz) ** 2


def make_ground_truth(subject: int, timepoint: int) -> LabelVolume:
    """Deterministic phantom label map for one scan.

    Subjects differ in footprint radii and slab thickness; year1 thins
    the cartilage slabs of subjects 0 and 1 by one voxel (a synthetic
    longitudinal change). Tissues occupy disjoint y-bands.
    """
    nx, ny, nz = GRID
    labels = np.zeros(GRID, dtype=np.uint8)
    x = np.arange(nx)[:, None]
    z = np.arange(nz)[None, :]

    thin = 1 if (timepoint == 1 and subject < 2) else 0
    rx = 11 + (subject % 2)
    rz = 6 + (subject % 3)

    # femoral cartilage: curved sheet, thickness 5..6 voxels along y
    fem = _footprint(nx, nz, 14, 8, rx, rz)
    sag = (x - 14) ** 2 // 24 + (z - 8) ** 2 // 12  # gentle bowl
    top = 16 - sag
    t_fem = 5 + (subject % 2) - thin
    for yy in range(ny):
        band = (yy <= top) & (yy > top - t_fem)
        labels[:, yy, :][fem & band] = 1

    # tibial cartilage: flat slab under the femoral sheet
    tib = _footprint(nx, nz, 14, 8, rx - 1, rz)
    t_tib = 4 + (subject % 3 == 0) - thin
    y0 = 5
    labels[:, y0 : y0 + t_tib, :][np.broadcast_to(tib[:, None, :], (nx, t_tib, nz))] = 2

    # patellar cartilage: small slab high in y, offset in x
    pat = _footprint(nx, nz, 6 + subject, 8, 4, 3 + (subject % 2))
    t_pat = 4 - thin
    y1 = 20
    labels[:, y1 : y1 + t_pat, :][np.broadcast_to(pat[:, None, :], (nx, t_pat, nz))] = 3

    # meniscus: wedge between the cartilage plates, thickness tapering in x
    men = _footprint(nx, nz, 22, 9, 6, 4)
    taper = np.clip(4 - (np.abs(x - 22) // 3), 1, 4)
    y2 = 1
    for yy in range(y2, y2 + 4):
        band = (yy - y2) < taper
        sel = men & band & (labels[:, yy, :] == 0)
        labels[:, yy, :][sel] = 4

    return LabelVolume(labels, SPACING)


def _erode_partial(mask: np.ndarray, tissue: int) -> np.ndarray:
    """Cut a sparse dimple lattice into the +y-facing surface."""
    nx, _ny, nz = mask.shape
    top = mask.copy()
    top[:, :-1, :] &= ~mask[:, 1:, :]  # last y row is always top-facing
    x = np.arange(nx)[:, None]
    z = np.arange(nz)[None, :]
    lattice = (x + 2 * z) % EROSION_MODULI[tissue] == 0
    return mask & ~(top & lattice[:, None, :])


def make_prediction(gt: LabelVolume, model: str) -> LabelVolume:
    if model == "copygt":
        return gt
    if model == "eroded":
        labels = np.zeros(gt.dims, dtype=np.uint8)
        for tissue in (1, 2, 3, 4):
            mask = np.asarray(gt.voxels == tissue)
            labels[_erode_partial(mask, tissue)] = tissue
        return LabelVolume(labels, gt.spacing, gt.through_plane_axis)
    if model == "shifted":
        labels = np.zeros(gt.dims, dtype=np.uint8)
        labels[1:, :, :] = gt.voxels[:-1, :, :]
        return LabelVolume(labels, gt.spacing, gt.through_plane_axis)
    raise ValueError(f"unknown synthetic model {model!r}")


def write_synthetic_dataset(out_dir: str | Path) -> Path:
    """Write the phantom dataset and manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    for model in MODELS:
        (out / "pred" / model).mkdir(parents=True, exist_ok=True)

    rows = []
    for si, subject in enumerate(SUBJECTS):
        for ti, timepoint in enumerate(TIMEPOINTS):
            gt = make_ground_truth(si, ti)
            stem = f"{subject}_{timepoint}.segv"
            save_volume(gt, out / "gt" / stem)
            row = {
                "subject_id": subject,
                "timepoint": timepoint,
                "split": "test",
                "ground_truth_path": f"gt/{stem}",
                "kl_grade": str(si + 1),
                "bmi": str(24 + 2 * si),
                "age": str(55 + 3 * si + ti),
                "sex": "male" if si % 2 == 0 else "female",
            }
            for model in MODELS:
                save_volume(make_prediction(gt, model), out / "pred" / model / stem)
                row[f"model:{model}"] = f"pred/{model}/{stem}"
            rows.append(row)

    manifest = out / "manifest.csv"
    columns = [
        "subject_id",
        "timepoint",
        "split",
        "ground_truth_path",
        *(f"model:{m}" for m in MODELS),
        "kl_grade",
        "bmi",
        "age",
        "sex",
    ]
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return manifest


if __name__ == "__main__":  # pragma: no cover
    import sys

    target = sys.argv[1] if len(sys.argv) > 1 else "synthetic_data"
    path = write_synthetic_dataset(target)
    print(f"wrote {path}")
