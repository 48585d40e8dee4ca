"""Dataset manifests: CSV of samples plus a referenced hierarchy file.

Format: optional comment pragmas first (``#hierarchy=<path>`` is
required, resolved relative to the manifest), then a header row
``path,domain,y0,...,y{G-1}`` and one row per sample. Label columns are
fine-to-coarse and every row's label vector must agree with the
hierarchy.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import ImageDataset
from .errors import ManifestError
from .hierarchy import GranularityHierarchy, load_hierarchy


@dataclass
class ManifestRecord:
    path: str
    domain: str
    labels: tuple[int, ...]  # fine first


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    hierarchy: GranularityHierarchy
    root: Path

    @property
    def domains(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.domain)
        return tuple(seen)


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    hierarchy_ref: str | None = None
    data_lines: list[str] = []
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith("#hierarchy="):
                hierarchy_ref = line.split("=", 1)[1].strip()
            continue
        data_lines.append(raw)
    if hierarchy_ref is None:
        raise ManifestError(f"{path}: missing #hierarchy= pragma")
    hierarchy = load_hierarchy((path.parent / hierarchy_ref).resolve())

    reader = csv.reader(data_lines)
    header = next(reader, None)
    G = hierarchy.levels
    expected = ["path", "domain"] + [f"y{g}" for g in range(G)]
    if header != expected:
        raise ManifestError(f"{path}: header {header} != {expected}")
    records = []
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(expected):
            raise ManifestError(f"{path}: row {lineno} has {len(row)} cells")
        try:
            labels = tuple(int(v) for v in row[2:])
        except ValueError:
            raise ManifestError(f"{path}: row {lineno} has non-integer labels")
        if labels[0] < 0 or labels[0] >= hierarchy.num_fine:
            raise ManifestError(f"{path}: row {lineno} fine label {labels[0]} out of range")
        truth = tuple(int(v) for v in hierarchy.class_vector(labels[0]))
        if labels != truth:
            raise ManifestError(
                f"{path}: row {lineno} labels {labels} contradict the hierarchy {truth}"
            )
        records.append(ManifestRecord(path=row[0], domain=row[1], labels=labels))
    if not records:
        raise ManifestError(f"{path}: no sample rows")
    return DatasetManifest(records=records, hierarchy=hierarchy, root=path.parent)


def load_images(manifest: DatasetManifest, domain: str) -> ImageDataset:
    """Materialize one domain of a manifest as float tensors in [0, 1]."""
    records = [r for r in manifest.records if r.domain == domain]
    if not records:
        raise ManifestError(f"manifest has no samples for domain {domain!r}")
    images = []
    for r in records:
        with Image.open(manifest.root / r.path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        images.append(torch.from_numpy(arr.transpose(2, 0, 1)))
    return ImageDataset(
        images=torch.stack(images),
        labels=torch.tensor([r.labels[0] for r in records], dtype=torch.long),
        num_classes=manifest.hierarchy.num_fine,
        domain=domain,
        sample_ids=tuple(r.path for r in records),
    )


def write_dataset(
    datasets: dict[str, ImageDataset],
    hierarchy: GranularityHierarchy,
    out_dir: str | Path,
) -> Path:
    """Write PNGs, the hierarchy file, and the manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hierarchy_path = out_dir / "hierarchy.txt"
    hierarchy.save(hierarchy_path)

    rows = []
    for name, ds in datasets.items():
        domain_dir = out_dir / "images" / name
        domain_dir.mkdir(parents=True, exist_ok=True)
        for i in range(len(ds)):
            arr = (ds.images[i].numpy().transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
            rel = Path("images") / name / f"{ds.sample_ids[i]}.png"
            Image.fromarray(arr).save(out_dir / rel)
            vec = hierarchy.class_vector(int(ds.labels[i]))
            rows.append([str(rel), name] + [str(int(v)) for v in vec])

    manifest_path = out_dir / "manifest.csv"
    with open(manifest_path, "w", newline="") as fh:
        fh.write("#hierarchy=hierarchy.txt\n")
        writer = csv.writer(fh, lineterminator="\n")
        G = hierarchy.levels
        writer.writerow(["path", "domain"] + [f"y{g}" for g in range(G)])
        writer.writerows(rows)
    return manifest_path


def file_hash(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
