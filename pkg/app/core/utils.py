import csv
import logging
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from app.core.models import ArchName, EpochRecord, GroupName, ParameterManifest, TensorEntry, TrainingRun
from app.core.tensor import Tensor

logger = logging.getLogger(__name__)

BLOB_DTYPE = np.dtype("<f8")


def write_json(path: Path, record: BaseModel) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(record.model_dump_json(indent=2) + "\n")
    return path


def save_parameters(
    blob_path: Path,
    manifest_path: Path,
    params: dict[str, Tensor],
    arch: ArchName,
    group: GroupName,
    run: TrainingRun | None = None,
) -> ParameterManifest:
    """Write every tensor, in order, into one little-endian float64 blob plus a JSON shape manifest.

    ``run`` records how the model was built and which splits it saw, so eval can rebuild both.
    """
    entries, offset = [], 0
    for name, value in params.items():
        entries.append(TensorEntry(name=name, shape=list(value.shape), offset=offset))
        offset += value.size
    manifest = ParameterManifest(arch=arch, group=group, tensors=entries, count=offset, run=run)

    flat = np.concatenate([np.ravel(value) for value in params.values()]) if params else np.zeros(0)
    blob_path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(flat.astype(BLOB_DTYPE).tobytes())
    write_json(manifest_path, manifest)
    logger.info(f"Saved {offset} parameters to {blob_path}")
    return manifest


def load_parameters(blob_path: Path, manifest_path: Path) -> tuple[ParameterManifest, dict[str, Tensor]]:
    manifest = ParameterManifest.model_validate_json(Path(manifest_path).read_text())
    raw = Path(blob_path).read_bytes()
    expected = manifest.count * BLOB_DTYPE.itemsize
    if len(raw) != expected:
        raise ValueError(
            f"Parameter blob {blob_path} has {len(raw)} bytes, manifest expects {expected} "
            f"({manifest.count} float64 values)"
        )
    flat = np.frombuffer(raw, dtype=BLOB_DTYPE).astype(np.float64)
    params = {}
    for entry in manifest.tensors:
        if entry.offset + entry.size > manifest.count:
            raise ValueError(f"Manifest entry {entry.name} runs past the end of the blob")
        params[entry.name] = flat[entry.offset : entry.offset + entry.size].reshape(entry.shape).copy()
    return manifest, params


def write_history_csv(path: Path, history: list[EpochRecord]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "valid_error"])
        for record in history:
            writer.writerow([record.epoch, repr(record.train_loss), repr(record.valid_error)])
    return path


def write_rows_csv(path: Path, rows: list[BaseModel], columns: list[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            data = row.model_dump()
            writer.writerow([data[column] for column in columns])
    return path


def write_amat(path: Path, images: Tensor, labels: np.ndarray) -> Path:
    """One line per sample: 784 pixels then the label, whitespace separated."""
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = images.reshape(images.shape[0], -1)
    with path.open("w") as handle:
        for pixels, label in zip(flat, labels):
            handle.write(" ".join(f"{value:.17g}" for value in pixels))
            handle.write(f" {float(label):.1f}\n")
    return path
