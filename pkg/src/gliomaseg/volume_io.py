"""Reading and writing NIfTI volumes, BraTS subject folders and survival tables.

Volumes keep the voxel order stored in the file header, i.e. arrays are
indexed ``data[x, y, z]``. No reorientation is attempted.
"""

from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import nibabel as nib
import numpy as np

MODALITIES = ("T1", "T1Gd", "T2", "FLAIR")
# file suffix used by BraTS for each modality
MODALITY_SUFFIX = {"T1": "t1", "T1Gd": "t1ce", "T2": "t2", "FLAIR": "flair"}
LABEL_SUFFIX = "seg"
NIFTI_EXTENSIONS = (".nii.gz", ".nii")

DEFAULT_SURVIVAL_COLUMNS = {
    "id": "BraTS19ID",
    "age": "Age",
    "survival": "Survival",
    "resection": "ResectionStatus",
}


class DataError(Exception):
    """Input data is missing, malformed or inconsistent."""


class ResectionStatus(str, enum.Enum):
    GTR = "GTR"
    STR = "STR"
    NA = "NA"

    @classmethod
    def parse(cls, text: Optional[str]) -> "ResectionStatus":
        text = (text or "").strip().upper()
        try:
            return cls(text)
        except ValueError:
            return cls.NA


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) <= 0:
            raise DataError(f"volume must be a non-empty 3D array, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.affine is None:
            self.affine = np.diag(list(self.spacing) + [1.0])

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape)


@dataclass
class Subject:
    id: str
    modalities: Dict[str, Volume]
    label: Optional[np.ndarray] = None
    age: Optional[float] = None
    survival_days: Optional[float] = None
    resection_status: ResectionStatus = ResectionStatus.NA

    @property
    def reference(self) -> Volume:
        return self.modalities[MODALITIES[0]]

    @property
    def shape(self) -> tuple:
        return self.reference.shape

    def stack(self) -> np.ndarray:
        """Modalities stacked along a leading channel axis in MODALITIES order."""
        return np.stack([self.modalities[m].data for m in MODALITIES]).astype(np.float32)


@dataclass
class SurvivalRecord:
    id: str
    age: float
    survival_days: Optional[float] = None
    resection_status: ResectionStatus = ResectionStatus.NA

    def __post_init__(self):
        if not self.age > 0:
            raise DataError(f"{self.id}: age must be positive, got {self.age}")
        if self.survival_days is not None and self.survival_days < 0:
            raise DataError(f"{self.id}: negative survival {self.survival_days}")


def load_volume(path) -> Volume:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    try:
        img = nib.load(str(path))
        data = np.asanyarray(img.dataobj)
    except Exception as exc:  # nibabel raises a zoo of types for bad files
        raise DataError(f"malformed NIfTI file {path}: {exc}") from exc
    if data.ndim != 3:
        raise DataError(f"non-3D image {path}: shape {data.shape}")
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return Volume(data=np.asarray(data), spacing=spacing, affine=np.asarray(img.affine, dtype=float))


def save_volume(volume: Volume, path) -> None:
    path = Path(path)
    img = nib.Nifti1Image(volume.data, volume.affine)
    img.header.set_zooms(volume.spacing)
    try:
        nib.save(img, str(path))
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def save_label_map(label_map: np.ndarray, ref: Volume, path) -> None:
    """Write an integer label map in the geometry of ``ref``."""
    label_map = np.asarray(label_map)
    if label_map.shape != ref.shape:
        raise DataError(f"label map shape {label_map.shape} does not match reference {ref.shape}")
    if label_map.size and (label_map.min() < np.iinfo(np.int16).min or label_map.max() > np.iinfo(np.int16).max):
        raise DataError("label values do not fit in int16")
    path = Path(path)
    if not path.parent.is_dir():
        raise DataError(f"cannot write {path}: parent directory does not exist")
    img = nib.Nifti1Image(label_map.astype(np.int16), ref.affine)
    img.header.set_zooms(ref.spacing)
    img.header.set_data_dtype(np.int16)
    img.header["scl_slope"] = 1
    img.header["scl_inter"] = 0
    try:
        nib.save(img, str(path))
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def find_nifti(prefix: Path) -> Optional[Path]:
    for ext in NIFTI_EXTENSIONS:
        candidate = prefix.parent / (prefix.name + ext)
        if candidate.is_file():
            return candidate
    return None


def load_subject(root_dir, subject_id: str) -> Subject:
    folder = Path(root_dir) / subject_id
    if not folder.is_dir():
        raise DataError(f"missing subject directory {folder}")
    paths = {m: find_nifti(folder / f"{subject_id}_{MODALITY_SUFFIX[m]}") for m in MODALITIES}
    missing = [MODALITY_SUFFIX[m] for m, p in paths.items() if p is None]
    if missing:
        raise DataError(f"{subject_id}: missing modality file(s): " + ", ".join(f"_{s}" for s in missing))

    modalities = {m: load_volume(p) for m, p in paths.items()}
    ref = modalities[MODALITIES[0]]
    for m, vol in modalities.items():
        if vol.shape != ref.shape or not np.allclose(vol.spacing, ref.spacing):
            raise DataError(
                f"{subject_id}: {m} has shape {vol.shape} / spacing {vol.spacing}, "
                f"expected {ref.shape} / {ref.spacing}"
            )

    label = None
    label_path = find_nifti(folder / f"{subject_id}_{LABEL_SUFFIX}")
    if label_path is not None:
        label_vol = load_volume(label_path)
        if label_vol.shape != ref.shape:
            raise DataError(f"{subject_id}: label shape {label_vol.shape} != {ref.shape}")
        label = np.rint(label_vol.data).astype(np.int16)
    return Subject(id=subject_id, modalities=modalities, label=label)


def list_subjects(root_dir) -> List[str]:
    """Subject ids under ``root_dir``: every sub-directory, sorted."""
    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"missing data directory {root}")
    return sorted(p.name for p in root.iterdir() if p.is_dir())


def _parse_float(text: Optional[str]) -> Optional[float]:
    try:
        value = float((text or "").strip())
    except ValueError:
        return None
    return value if np.isfinite(value) else None


def load_survival_table(path, columns: Optional[Dict[str, str]] = None) -> List[SurvivalRecord]:
    """Parse a BraTS survival CSV.

    ``columns`` maps the logical names ``id``, ``age``, ``survival`` and
    ``resection`` to header names. ``id`` and ``age`` are required; the other
    two may be absent from the file. Survival cells that are not plain numbers
    (blank, "ALIVE (361 days later)", ...) give ``survival_days=None``.
    """
    cols = dict(DEFAULT_SURVIVAL_COLUMNS)
    cols.update(columns or {})
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing survival table {path}")
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [cols[k] for k in ("id", "age") if cols[k] not in header]
        if missing:
            raise DataError(f"{path}: missing required column(s) {missing}")
        records = []
        for row in reader:
            sid = (row[cols["id"]] or "").strip()
            if not sid:
                continue
            age = _parse_float(row[cols["age"]])
            if age is None:
                raise DataError(f"{path}: unparseable age {row[cols['age']]!r} for {sid}")
            survival = _parse_float(row.get(cols["survival"])) if cols["survival"] in header else None
            status = ResectionStatus.parse(row.get(cols["resection"])) if cols["resection"] in header else ResectionStatus.NA
            records.append(SurvivalRecord(id=sid, age=age, survival_days=survival, resection_status=status))
    return records


def write_survival_table(records: Sequence[SurvivalRecord], path, columns: Optional[Dict[str, str]] = None) -> None:
    cols = dict(DEFAULT_SURVIVAL_COLUMNS)
    cols.update(columns or {})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([cols["id"], cols["age"], cols["survival"], cols["resection"]])
        for r in records:
            days = "" if r.survival_days is None else repr(float(r.survival_days))
            writer.writerow([r.id, repr(float(r.age)), days, r.resection_status.value])


def attach_survival(subject: Subject, records: Sequence[SurvivalRecord]) -> Subject:
    for r in records:
        if r.id == subject.id:
            subject.age = r.age
            subject.survival_days = r.survival_days
            subject.resection_status = r.resection_status
            break
    return subject


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
