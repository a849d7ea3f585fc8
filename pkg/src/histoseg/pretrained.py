"""Loading and auditing of converted pretrained encoder weights.

The archive is framework-neutral: a UTF-8 manifest (one line per tensor:
``name<TAB>dtype<TAB>d0,d1,...<TAB>byte_offset``) plus a raw little-endian
blob holding the tensor values contiguously in manifest order. A shipped
name-translation table maps the published checkpoint's tensor names onto
this package's parameter names.

Policy implemented by :func:`map_pretrained`: window blocks, patch-merging
layers, and relative-position-bias tables load from the archive; the patch
embedding block is always left at its random initialization (its patch size
and input channels differ from the pretraining setup); modules with no
published counterpart (stem, decoder, attention add-ons, surplus stage
blocks) stay randomly initialized. Any shape mismatch on an expected tensor
is a hard error; silent partial loads are not allowed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .errors import ManifestError

DTYPES = {"f16": "<f2", "f32": "<f4", "f64": "<f8"}

# Model parameters matching this prefix are never loaded from the archive.
PATCH_EMBED_PREFIX = "encoder.patch_embed."

TRANSLATION_RESOURCE = "swin_tiny_map.tsv"


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    dtype: str
    shape: tuple[int, ...]
    byte_offset: int

    @property
    def nbytes(self) -> int:
        count = 1
        for d in self.shape:
            count *= d
        return count * np.dtype(DTYPES[self.dtype]).itemsize


@dataclass
class WeightManifest:
    entries: list[ManifestEntry]
    blob_path: Path
    total_bytes: int

    def __post_init__(self) -> None:
        self.by_name = {e.name: e for e in self.entries}

    def names(self) -> list[str]:
        return [e.name for e in self.entries]


@dataclass
class MappingReport:
    """Audit record of what map_pretrained did to every model parameter."""

    loaded: list[tuple[str, str]] = field(default_factory=list)
    skipped_by_policy: list[str] = field(default_factory=list)
    randomly_initialized: list[str] = field(default_factory=list)
    unused_source: list[str] = field(default_factory=list)

    def model_side_names(self) -> list[str]:
        return ([name for name, _ in self.loaded]
                + self.skipped_by_policy
                + self.randomly_initialized)


def default_blob_path(manifest_path: str | Path) -> Path:
    return Path(manifest_path).with_suffix(".bin")


def read_manifest(manifest_path: str | Path,
                  blob_path: str | Path | None = None) -> WeightManifest:
    """Parse and validate a manifest; verify the blob's size on disk."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ManifestError(f"manifest not found: {manifest_path}")
    blob_path = Path(blob_path) if blob_path else default_blob_path(manifest_path)

    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestError(
                f"{manifest_path}:{lineno}: expected 4 tab-separated fields, "
                f"got {len(parts)}"
            )
        name, dtype, dims, offset = parts
        if name in seen:
            raise ManifestError(f"{manifest_path}:{lineno}: duplicate tensor {name!r}")
        seen.add(name)
        if dtype not in DTYPES:
            raise ManifestError(
                f"{manifest_path}:{lineno}: unknown dtype tag {dtype!r}"
            )
        try:
            shape = tuple(int(d) for d in dims.split(",") if d != "")
            byte_offset = int(offset)
        except ValueError as exc:
            raise ManifestError(f"{manifest_path}:{lineno}: {exc}") from exc
        if byte_offset < 0 or any(d < 1 for d in shape):
            raise ManifestError(
                f"{manifest_path}:{lineno}: negative offset or non-positive dim"
            )
        entries.append(ManifestEntry(name, dtype, shape, byte_offset))

    expected_offset = 0
    for entry in entries:
        if entry.byte_offset != expected_offset:
            kind = "overlap" if entry.byte_offset < expected_offset else "gap"
            raise ManifestError(
                f"manifest {kind} at tensor {entry.name!r}: offset "
                f"{entry.byte_offset}, expected {expected_offset}"
            )
        expected_offset += entry.nbytes
    total_bytes = expected_offset

    if not blob_path.is_file():
        raise ManifestError(f"weight blob not found: {blob_path}")
    actual = blob_path.stat().st_size
    if actual != total_bytes:
        raise ManifestError(
            f"blob size mismatch: {blob_path} has {actual} bytes, manifest "
            f"describes {total_bytes}"
        )
    return WeightManifest(entries, blob_path, total_bytes)


def read_blob_tensor(manifest: WeightManifest, name: str) -> np.ndarray:
    """Read one tensor's values out of the blob."""
    entry = manifest.by_name[name]
    with open(manifest.blob_path, "rb") as fh:
        fh.seek(entry.byte_offset)
        raw = fh.read(entry.nbytes)
    if len(raw) != entry.nbytes:
        raise ManifestError(f"blob truncated while reading {name!r}")
    return np.frombuffer(raw, dtype=DTYPES[entry.dtype]).reshape(entry.shape).copy()


def write_archive(named_arrays: list[tuple[str, np.ndarray]],
                  manifest_path: str | Path,
                  blob_path: str | Path | None = None) -> WeightManifest:
    """Serialize (name, array) pairs into the manifest + blob pair."""
    manifest_path = Path(manifest_path)
    blob_path = Path(blob_path) if blob_path else default_blob_path(manifest_path)
    tag_by_itemsize = {2: "f16", 4: "f32", 8: "f64"}

    lines = []
    offset = 0
    with open(blob_path, "wb") as blob:
        for name, array in named_arrays:
            if array.dtype.kind != "f" or array.dtype.itemsize not in tag_by_itemsize:
                raise ManifestError(
                    f"unsupported dtype {array.dtype} for tensor {name!r}"
                )
            tag = tag_by_itemsize[array.dtype.itemsize]
            data = np.ascontiguousarray(array, dtype=DTYPES[tag])
            dims = ",".join(str(d) for d in array.shape)
            lines.append(f"{name}\t{tag}\t{dims}\t{offset}")
            blob.write(data.tobytes())
            offset += data.nbytes
    manifest_path.write_text("\n".join(lines) + "\n")
    return read_manifest(manifest_path, blob_path)


def load_translation_table() -> dict[str, str]:
    """Source tensor name -> model parameter name, from the shipped table."""
    text = (
        resources.files("histoseg.resources").joinpath(TRANSLATION_RESOURCE)
        .read_text()
    )
    table: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        source, target = line.split("\t")
        table[source] = target
    return table


def map_pretrained(model: torch.nn.Module, manifest: WeightManifest) -> MappingReport:
    """Copy archive tensors onto the model per the initialization policy."""
    params = dict(model.named_parameters())
    table = load_translation_table()

    report = MappingReport()
    consumed: set[str] = set()
    loaded_names: set[str] = set()

    for source_name, model_name in table.items():
        param = params.get(model_name)
        if param is None:
            continue  # reduced configs may not have this block
        if model_name.startswith(PATCH_EMBED_PREFIX):
            continue  # policy: never load the patch embedding
        entry = manifest.by_name.get(source_name)
        if entry is None:
            continue  # falls through to randomly_initialized
        if tuple(param.shape) != entry.shape:
            raise ManifestError(
                f"shape mismatch for {source_name!r} -> {model_name!r}: archive "
                f"has {entry.shape}, model expects {tuple(param.shape)}"
            )
        values = read_blob_tensor(manifest, source_name)
        with torch.no_grad():
            param.copy_(torch.from_numpy(values).to(param.dtype))
        report.loaded.append((model_name, source_name))
        consumed.add(source_name)
        loaded_names.add(model_name)

    for name in params:
        if name in loaded_names:
            continue
        if name.startswith(PATCH_EMBED_PREFIX):
            report.skipped_by_policy.append(name)
        else:
            report.randomly_initialized.append(name)

    report.unused_source = [n for n in manifest.names() if n not in consumed]
    return report


def write_mapping_report(report: MappingReport, path: str | Path) -> None:
    """Emit the report as sectioned text, one name per line."""
    lines = ["# pretrained weight mapping report"]
    lines.append(f"[loaded] {len(report.loaded)}")
    for model_name, source_name in report.loaded:
        lines.append(f"{model_name}\t<-\t{source_name}")
    lines.append(f"[skipped_by_policy] {len(report.skipped_by_policy)}")
    lines.extend(report.skipped_by_policy)
    lines.append(f"[randomly_initialized] {len(report.randomly_initialized)}")
    lines.extend(report.randomly_initialized)
    lines.append(f"[unused_source] {len(report.unused_source)}")
    lines.extend(report.unused_source)
    Path(path).write_text("\n".join(lines) + "\n")
