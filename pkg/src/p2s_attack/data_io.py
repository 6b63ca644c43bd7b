"""Point-cloud files, synthetic dataset manifests, run logs and reports."""

import csv
import hashlib
import io
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, EmptyMesh, ParseError
from .geometry import DEFAULT_SHAPE_PARAMS, SHAPE_KINDS, PointCloud, SyntheticShape, normalize

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1

# display columns in table order: (header, field, scale)
REPORT_COLUMNS = (
    ("ASR(%)", "asr", 100.0),
    ("CD(x1e-4)", "cd", 1e4),
    ("HD(x1e-2)", "hd", 1e2),
    ("l2", "l2", 1.0),
    ("GR", "gr", 1.0),
    ("Curv(x1e-2)", "curv", 1e2),
    ("EMD(x1e-2)", "emd", 1e2),
)


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- XYZ / OFF ---------------------------------------------------------------


def read_xyz(path):
    """One `x y z` triple per line; blank lines and `#` comments are skipped."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 3:
                raise ParseError(f"expected 3 coordinates, got {len(parts)}", lineno, path)
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise ParseError(f"bad number in {text!r}", lineno, path) from None
    if not rows:
        raise ParseError("no points in file", None, path)
    return np.array(rows, dtype=np.float64)


def format_xyz(points):
    return "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in np.asarray(points, dtype=np.float64).tolist())


def write_xyz(path, points):
    atomic_write_text(path, format_xyz(points))


def _off_tokens(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            for tok in line.split("#", 1)[0].split():
                yield lineno, tok


def read_off(path):
    """Return (vertices (V, 3), triangles (T, 3)); polygons are fan-triangulated."""
    tokens = _off_tokens(path)

    def take(kind):
        try:
            lineno, tok = next(tokens)
        except StopIteration:
            raise ParseError(f"unexpected end of file while reading {kind}", None, path) from None
        try:
            return float(tok) if kind == "coordinate" else int(tok)
        except ValueError:
            raise ParseError(f"bad {kind} {tok!r}", lineno, path) from None

    try:
        lineno, head = next(tokens)
    except StopIteration:
        raise ParseError("empty file", 1, path) from None
    if not head.startswith("OFF"):
        raise ParseError(f"missing OFF header, found {head!r}", lineno, path)
    # some writers glue the counts onto the header ("OFF8 6 0")
    rest = head[3:]
    n_vert = int(rest) if rest.isdigit() else take("vertex count")
    n_face, _ = take("face count"), take("edge count")
    if n_vert < 0 or n_face < 0:
        raise ParseError("negative element count", lineno, path)
    verts = np.array([[take("coordinate") for _ in range(3)] for _ in range(n_vert)], dtype=np.float64)
    tris = []
    for _ in range(n_face):
        k = take("face size")
        idx = [take("vertex index") for _ in range(k)]
        if any(i < 0 or i >= n_vert for i in idx):
            raise ParseError(f"face references vertex outside 0..{n_vert - 1}", None, path)
        tris += [(idx[0], idx[j], idx[j + 1]) for j in range(1, k - 1)]
    return verts.reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3)


def sample_mesh(verts, tris, n, rng):
    """Area-weighted uniform samples on a triangle mesh. Returns (points, face index)."""
    if len(tris) == 0:
        raise EmptyMesh("mesh has no faces to sample")
    a, b, c = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if not total > 0:
        raise EmptyMesh("mesh has zero surface area")
    face = rng.choice(len(tris), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    pts = (1 - r1)[:, None] * a[face] + (r1 * (1 - r2))[:, None] * b[face] + (r1 * r2)[:, None] * c[face]
    return pts, face


def load_cloud(path, fmt=None, n_points=1024, seed=0, label=None, id=None):
    """Read an XYZ or OFF file into a normalized cloud of (at most) n_points points."""
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    rng = np.random.default_rng(seed)
    if fmt == "xyz":
        pts = read_xyz(path)
        if len(pts) > n_points:
            pts = pts[np.sort(rng.choice(len(pts), n_points, replace=False))]
    elif fmt == "off":
        verts, tris = read_off(path)
        if len(tris):
            pts, _ = sample_mesh(verts, tris, n_points, rng)
        elif len(verts) >= n_points:
            pts = verts[np.sort(rng.choice(len(verts), n_points, replace=False))]
        else:
            raise EmptyMesh(f"{path}: {len(verts)} vertices, no faces, {n_points} points requested")
    else:
        raise DataError(f"unsupported point-cloud format {fmt!r}")
    return normalize(PointCloud(pts, label=label, id=id))


# --- manifests ---------------------------------------------------------------


@dataclass
class ManifestEntry:
    id: str
    path: str
    format: str
    label: int
    split: str
    shape: dict | None = None  # generator parameters for synthetic clouds


@dataclass
class DatasetManifest:
    classes: list
    entries: list
    seed: int
    n_points: int = 1024
    root: Path | None = field(default=None, compare=False)

    def to_json(self):
        data = {
            "version": MANIFEST_VERSION,
            "classes": list(self.classes),
            "seed": self.seed,
            "n_points": self.n_points,
            "entries": [asdict(e) for e in self.entries],
        }
        return json.dumps(data, indent=1, sort_keys=True) + "\n"

    def digest(self):
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def save(self, path):
        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"manifest not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ParseError(f"manifest is not valid JSON: {exc.msg}", exc.lineno, path) from None
        if data.get("version") != MANIFEST_VERSION:
            raise DataError(f"unsupported manifest version {data.get('version')!r}")
        entries = [ManifestEntry(**e) for e in data["entries"]]
        m = cls(data["classes"], entries, data["seed"], data.get("n_points", 1024), root=path.parent)
        m.validate()
        return m

    def validate(self, check_files=True):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("manifest ids are not unique")
        for e in self.entries:
            if not 0 <= e.label < len(self.classes):
                raise DataError(f"{e.id}: label {e.label} outside class table")
            if e.split not in ("train", "test"):
                raise DataError(f"{e.id}: unknown split {e.split!r}")
            if check_files and self.root is not None and not os.access(self.root / e.path, os.R_OK):
                raise DataError(f"{e.id}: cannot read {self.root / e.path}")

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def load_split(self, name):
        return [self.load_entry(e) for e in self.split(name)]

    def load_entry(self, entry):
        path = (self.root or Path(".")) / entry.path
        seed = int.from_bytes(hashlib.sha256(f"{self.seed}:{entry.id}".encode()).digest()[:4], "little")
        return load_cloud(path, entry.format, self.n_points, seed, label=entry.label, id=entry.id)

    def synthetic_shape(self, entry):
        if entry.shape is None:
            return None
        s = entry.shape
        return SyntheticShape(s["kind"], dict(s["params"]), s["seed"], self.n_points)


def build_synthetic_dataset(out_dir, classes=5, per_class=100, n_points=1024, seed=0, test_fraction=0.3):
    """Write `per_class` randomized clouds of each analytic shape plus a manifest.

    Shape parameters are jittered by a factor in [0.75, 1.25]. Within each
    class the first round(per_class * (1 - test_fraction)) instances form the
    train split. Returns the manifest (also written to out_dir/manifest.json).
    """
    if not 2 <= classes <= len(SHAPE_KINDS):
        raise ValueError(f"classes must be between 2 and {len(SHAPE_KINDS)}")
    if per_class < 2:
        raise ValueError("need at least 2 clouds per class for a train/test split")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    kinds = SHAPE_KINDS[:classes]
    n_train = min(per_class - 1, max(1, round(per_class * (1 - test_fraction))))
    entries = []
    for label, kind in enumerate(kinds):
        for i in range(per_class):
            params = {k: float(v * rng.uniform(0.75, 1.25)) for k, v in DEFAULT_SHAPE_PARAMS[kind].items()}
            shape_seed = int(rng.integers(0, 2**31 - 1))
            shape = SyntheticShape(kind, params, shape_seed, n_points)
            cid = f"{kind}_{i:04d}"
            rel = f"clouds/{cid}.xyz"
            write_xyz(out_dir / rel, shape.cloud().points)
            split = "train" if i < n_train else "test"
            entries.append(
                ManifestEntry(cid, rel, "xyz", label, split, {"kind": kind, "params": params, "seed": shape_seed})
            )
    manifest = DatasetManifest(list(kinds), entries, seed, n_points, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest


# --- run logs and reports ------------------------------------------------------


def append_jsonl(path, record):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"run log not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ParseError(f"bad JSON record: {exc.msg}", lineno, path) from None
    return out


def _display(value, scale):
    return "" if value is None else f"{value * scale:.3f}"


def report_csv(rows):
    """rows: list of (name, MetricsReport). CSV with display-scaled columns in table order."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["attack"] + [h for h, _, _ in REPORT_COLUMNS])
    for name, rep in rows:
        d = rep.to_dict()
        writer.writerow([name] + [_display(d[f], s) for _, f, s in REPORT_COLUMNS])
    return buf.getvalue()


def write_report(rows, metadata, path):
    """Write <path>.csv (display-scaled) and <path>.json (raw values + metadata).

    `path` may be given with or without a suffix. Returns the two paths.
    """
    base = Path(path)
    if base.suffix in (".csv", ".json"):
        base = base.with_suffix("")
    csv_path, json_path = base.with_suffix(".csv"), base.with_suffix(".json")
    atomic_write_text(csv_path, report_csv(rows))
    payload = {"rows": [{"attack": name, **rep.to_dict()} for name, rep in rows], "metadata": metadata}
    atomic_write_text(json_path, json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return csv_path, json_path


def read_report(path):
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    return json.loads(path.read_text(encoding="utf-8"))
