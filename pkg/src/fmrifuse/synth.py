"""Dataset manifests and a planted-signal synthetic generator.

A manifest is JSON::

    {"class_count": C,
     "samples": [{"volume": "...fvol", "meta": "...dcm|json", "label": 0, "domain": "site0"}]}

with paths relative to the manifest's directory.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dicom import write_dicom
from .errors import ConfigError, FormatError
from .fmri import Volume4D, atomic_write, volume_to_bytes
from .metadata import default_schema

_SITES = [
    ("SIEMENS", "Prisma", 3.0),
    ("GE MEDICAL SYSTEMS", "DISCOVERY MR750", 1.5),
    ("Philips Medical Systems", "Achieva", 3.0),
    ("SIEMENS", "Skyra", 1.5),
    ("GE MEDICAL SYSTEMS", "SIGNA Premier", 3.0),
    ("Philips Medical Systems", "Ingenia", 1.5),
]


@dataclass(frozen=True)
class Sample:
    volume: Path
    meta: Path
    label: int
    domain: str | None = None


@dataclass
class Dataset:
    samples: list
    class_count: int
    root: Path = Path(".")

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)


def load_manifest(path) -> Dataset:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc.msg}", offset=exc.pos) from exc
    try:
        class_count = int(obj["class_count"])
        entries = obj["samples"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"manifest {path} needs 'class_count' and 'samples'") from exc
    if class_count < 2:
        raise ConfigError(f"class_count must be >= 2, got {class_count}")
    root = path.parent
    samples = []
    for i, entry in enumerate(entries):
        label = int(entry["label"])
        if not 0 <= label < class_count:
            raise ConfigError(f"sample {i}: label {label} outside [0, {class_count})")
        volume, meta = root / entry["volume"], root / entry["meta"]
        for p in (volume, meta):
            if not p.exists():
                raise ConfigError(f"sample {i}: missing file {p}")
        samples.append(Sample(volume, meta, label, entry.get("domain") or None))
    if not samples:
        raise ConfigError(f"manifest {path} lists no samples")
    return Dataset(samples, class_count, root)


def manifest_dict(dataset: Dataset) -> dict:
    rows = []
    for s in dataset.samples:
        rows.append({
            "volume": Path(s.volume).relative_to(dataset.root).as_posix(),
            "meta": Path(s.meta).relative_to(dataset.root).as_posix(),
            "label": int(s.label),
            "domain": s.domain,
        })
    return {"class_count": dataset.class_count, "samples": rows}


def _dump(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode()


@dataclass
class SynthConfig:
    n_samples: int = 200
    n_test: int = 0
    dims: tuple = (8, 16, 16, 16)
    class_count: int = 2
    domain_count: int = 1
    amplitude: float = 5.0
    noise_sigma: float = 1.0
    confound: float = 0.0  # per-domain shift strength (metadata and volume offset)
    missing_rate: float = 0.0
    meta_format: str = "dcm"
    extra: dict = field(default_factory=dict)

    def validate(self):
        if self.n_samples < 1 or self.n_test < 0:
            raise ConfigError("n_samples must be >= 1 and n_test >= 0")
        if len(self.dims) != 4 or min(self.dims) < 1:
            raise ConfigError(f"dims must be four positive sizes, got {self.dims}")
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")
        if self.domain_count < 1:
            raise ConfigError("domain_count must be >= 1")
        if self.amplitude < 0 or self.noise_sigma < 0 or self.confound < 0:
            raise ConfigError("amplitude, noise_sigma and confound must be non-negative")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ConfigError("missing_rate must lie in [0, 1)")
        if self.meta_format not in ("dcm", "json"):
            raise ConfigError(f"meta_format must be 'dcm' or 'json', got {self.meta_format!r}")

    @classmethod
    def from_dict(cls, obj: dict) -> SynthConfig:
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(obj) - set(known))
        if unknown:
            raise ConfigError(f"unknown synth config keys: {unknown}")
        if "dims" in known:
            known["dims"] = tuple(known["dims"])
        cfg = cls(**known)
        cfg.validate()
        return cfg


def class_regions(cfg: SynthConfig, seed: int) -> list:
    """Spatial cuboid (slices over H, W, D) carrying each class's signal.

    Regions span every time point, are a quarter of each spatial axis, and are
    drawn disjoint from earlier classes when the volume leaves room for it.
    """
    _, H, W, D = cfg.dims
    sides = [max(1, s // 4) for s in (H, W, D)]
    regions = []
    for c in range(cfg.class_count):
        rng = np.random.default_rng([seed, c, 0x5EED])
        chosen = None
        for _ in range(200):
            starts = [int(rng.integers(0, s - k + 1)) for s, k in zip((H, W, D), sides)]
            box = tuple(slice(a, a + k) for a, k in zip(starts, sides))
            overlaps = [all(b.start < o.stop and o.start < b.stop for b, o in zip(box, other)) for other in regions]
            if chosen is None and box not in regions:
                chosen = box
            if not any(overlaps):
                chosen = box
                break
        regions.append(chosen)
    return regions


def _sample_metadata(rng, domain: int, cfg: SynthConfig) -> dict:
    manufacturer, model, field_strength = _SITES[domain % len(_SITES)]
    shift = cfg.confound * domain
    values = {
        "repetition_time": round(2000.0 + 150.0 * shift + rng.normal(0, 20.0), 1),
        "echo_time": round(30.0 + 4.0 * shift + rng.normal(0, 1.0), 2),
        "field_strength": field_strength,
        "age": float(rng.integers(18, 81)),
        "sex": "M" if rng.random() < 0.5 else "F",
        "manufacturer": manufacturer,
        "model_name": model,
    }
    for name in list(values):
        if name != "manufacturer" and rng.random() < cfg.missing_rate:
            values[name] = None
    return values


def _generate_split(cfg, seed, out_dir: Path, split: str, count: int, stream: int, schema) -> Dataset:
    rng = np.random.default_rng([seed, stream])
    regions = class_regions(cfg, seed)
    labels = rng.permutation(np.arange(count) % cfg.class_count)
    domains = rng.integers(0, cfg.domain_count, size=count)
    samples = []
    for i in range(count):
        label, domain = int(labels[i]), int(domains[i])
        data = rng.normal(0.0, cfg.noise_sigma, size=cfg.dims) if cfg.noise_sigma > 0 else np.zeros(cfg.dims)
        data[(slice(None),) + regions[label]] += cfg.amplitude
        data += cfg.confound * domain
        volume_path = out_dir / "volumes" / f"{split}_{i:04d}.fvol"
        atomic_write(volume_path, volume_to_bytes(Volume4D(data.astype(np.float32))))

        values = _sample_metadata(rng, domain, cfg)
        if cfg.meta_format == "dcm":
            meta_path = out_dir / "meta" / f"{split}_{i:04d}.dcm"
            uid = f"1.2.826.0.1.3680043.9.7433.{seed}.{stream}.{i + 1}"
            atomic_write(meta_path, write_dicom(values, schema, instance_uid=uid))
        else:
            meta_path = out_dir / "meta" / f"{split}_{i:04d}.json"
            present = {k: v for k, v in values.items() if v is not None}
            atomic_write(meta_path, _dump(present))
        samples.append(Sample(volume_path, meta_path, label, f"site{domain}"))
    return Dataset(samples, cfg.class_count, out_dir)


def synth_dataset(cfg: SynthConfig, seed: int, out_dir) -> dict:
    """Write volumes, metadata and manifests; returns manifest paths and hashes.

    The training split goes to ``manifest.json``; with ``n_test > 0`` a second
    independently drawn split goes to ``test_manifest.json``.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    (out_dir / "meta").mkdir(parents=True, exist_ok=True)
    schema = default_schema()
    result = {}
    splits = [("train", "manifest.json", cfg.n_samples, 1)]
    if cfg.n_test:
        splits.append(("test", "test_manifest.json", cfg.n_test, 2))
    for split, name, count, stream in splits:
        dataset = _generate_split(cfg, seed, out_dir, split, count, stream, schema)
        payload = _dump(manifest_dict(dataset))
        atomic_write(out_dir / name, payload)
        result[split] = {"manifest": str(out_dir / name), "sha256": hashlib.sha256(payload).hexdigest(), "n": count}
    (out_dir / "synth_config.json").write_bytes(_dump({"seed": seed, **asdict(cfg)}))
    return result
