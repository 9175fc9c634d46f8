"""On-disk layout of a labelled cloud collection.

A dataset directory holds ``manifest.csv`` (columns ``cloud_id, file, label,
class_name, split``) and one xyz file per cloud under ``clouds/``. Paths in
the manifest are relative to the directory.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Optional, Sequence

from .pointcloud import CLASS_NAMES, DatasetSpec, PointCloud, generate_dataset, read_cloud, train_test_split, write_cloud

__all__ = ["MANIFEST", "Dataset", "build_dataset", "write_dataset", "read_dataset"]

MANIFEST = "manifest.csv"
_FIELDS = ["cloud_id", "file", "label", "class_name", "split"]


@dataclass
class Dataset:
    clouds: list[PointCloud]
    cloud_ids: list[str]
    splits: list[str]
    class_names: list[str]

    def split(self, name: str) -> tuple[list[PointCloud], list[str]]:
        keep = [i for i, s in enumerate(self.splits) if s == name]
        return [self.clouds[i] for i in keep], [self.cloud_ids[i] for i in keep]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def build_dataset(spec: DatasetSpec, test_fraction: float = 0.2) -> Dataset:
    """Generate clouds and tag each with its split (split seeded by ``spec.seed``)."""
    clouds = [PointCloud(c.points, c.label, f"c{i:05d}") for i, c in enumerate(generate_dataset(spec))]
    _, test = train_test_split(clouds, test_fraction, spec.seed)
    test_ids = {c.source_path for c in test}
    ids = [c.source_path for c in clouds]
    splits = ["test" if i in test_ids else "train" for i in ids]
    return Dataset(clouds, ids, splits, list(spec.class_names))


def write_dataset(ds: Dataset, directory) -> None:
    os.makedirs(os.path.join(directory, "clouds"), exist_ok=True)
    rows = []
    for cloud, cid, split in zip(ds.clouds, ds.cloud_ids, ds.splits):
        rel = f"clouds/{cid}.xyz"
        write_cloud(cloud, os.path.join(directory, rel))
        rows.append([cid, rel, cloud.label, ds.class_names[cloud.label], split])
    with open(os.path.join(directory, MANIFEST), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_FIELDS)
        w.writerows(rows)


def read_dataset(directory, splits: Optional[Sequence[str]] = None) -> Dataset:
    path = os.path.join(directory, MANIFEST)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(_FIELDS) - set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns {', '.join(_FIELDS)}")
        rows = list(reader)
    names: dict[int, str] = {}
    clouds, ids, tags = [], [], []
    for r in rows:
        label = int(r["label"])
        names[label] = r["class_name"]
        if splits is not None and r["split"] not in splits:
            continue
        cloud = read_cloud(os.path.join(directory, r["file"]), label=label)
        clouds.append(cloud)
        ids.append(r["cloud_id"])
        tags.append(r["split"])
    if not names:
        raise ValueError(f"{path}: empty manifest")
    n_classes = max(names) + 1
    class_names = [names.get(i, CLASS_NAMES[i] if i < len(CLASS_NAMES) else f"class{i}") for i in range(n_classes)]
    return Dataset(clouds, ids, tags, class_names)
