"""Scene generation and persistence: synthetic scenes, 3D-GS PLY checkpoints,
JSON scene/camera files, PPM images and CSV reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraModel, Scene
from .pipeline import StageTimings

SH_C0 = 0.28209479177387814
SCENE_FORMAT = "tilesplat-scene"
SCENE_VERSION = 1


class FormatError(ValueError):
    """Malformed or unsupported input file."""


class SchemaError(FormatError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

DEFAULT_EXTENT = ((-4.0, 4.0), (-3.0, 3.0), (4.0, 12.0))


def synth_scene(seed: int, n: int, extent=DEFAULT_EXTENT, scale_log_mean: float = -3.0,
                scale_log_sigma: float = 0.8, opacity_range=(0.05, 0.95)) -> Scene:
    """Random scene: uniform means in the extent box, per-axis log-normal
    scales, uniformly random rotations, uniform opacity and colour."""
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng(seed)
    lo = np.array([e[0] for e in extent], dtype=np.float64)
    hi = np.array([e[1] for e in extent], dtype=np.float64)
    means = rng.uniform(lo, hi, size=(n, 3))
    scales = np.exp(rng.normal(scale_log_mean, scale_log_sigma, size=(n, 3)))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opacities = rng.uniform(opacity_range[0], opacity_range[1], size=n)
    colors = rng.uniform(0.0, 1.0, size=(n, 3))
    return Scene(means, scales, quats, opacities, colors)


def default_camera(width: int = 640, height: int = 480, focal: float = 500.0) -> CameraModel:
    return CameraModel.looking_down_z(focal, focal, width, height)


def standard_bench_scene(seed: int = 0, n: int = 10_000) -> tuple[Scene, CameraModel]:
    """The benchmark scene used for stage-timing comparisons (640x480)."""
    return synth_scene(seed, n), default_camera()


# ---------------------------------------------------------------------------
# 3D-GS PLY checkpoints
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_REQUIRED = ["x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3", "f_dc_0", "f_dc_1", "f_dc_2"]


def _parse_ply_header(fh):
    first = fh.readline()
    if first.strip() != b"ply":
        raise FormatError("not a PLY file (missing 'ply' magic)")
    fmt = None
    elements = []  # [name, count, [(prop, type)]]
    while True:
        line = fh.readline()
        if not line:
            raise FormatError("PLY header is missing 'end_header'")
        tok = line.decode("ascii", errors="replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise FormatError("PLY property declared before any element")
            if tok[1] == "list":
                elements[-1][2].append((tok[-1], "list"))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise FormatError(f"property {tok[-1]}: unknown PLY type {tok[1]!r}")
                elements[-1][2].append((tok[2], tok[1]))
    if fmt == "ascii":
        raise FormatError("ASCII PLY is not supported; export a binary_little_endian file")
    if fmt == "binary_big_endian":
        raise FormatError("big-endian PLY is not supported; expected binary_little_endian")
    if fmt != "binary_little_endian":
        raise FormatError(f"unsupported PLY format {fmt!r}")
    return elements


def load_gs_ply(path) -> Scene:
    """Read the degree-0 subset of a 3D-GS checkpoint and apply the trainer's
    activations (logistic opacity, exp scale, normalised quaternion, SH0 colour)."""
    path = Path(path)
    with open(path, "rb") as fh:
        elements = _parse_ply_header(fh)
        payload = fh.read()
    offset = 0
    vertex = None
    for name, count, props in elements:
        if any(t == "list" for _, t in props):
            if name == "vertex":
                raise FormatError("vertex element must not contain list properties")
            if vertex is None:
                raise FormatError(f"cannot skip list-property element {name!r} preceding 'vertex'")
            break
        dtype = np.dtype([(p, "<" + _PLY_TYPES[t]) for p, t in props])
        if name == "vertex":
            vertex = (count, props, dtype, offset)
            break
        offset += count * dtype.itemsize
    if vertex is None:
        raise FormatError("PLY has no 'vertex' element")
    count, props, dtype, offset = vertex
    types = dict(props)
    for prop in _REQUIRED:
        if prop not in types:
            raise FormatError(f"missing required property {prop!r}")
        if _PLY_TYPES[types[prop]][0] != "f":
            raise FormatError(f"property {prop!r} must be float, got {types[prop]!r}")
    need = count * dtype.itemsize
    if len(payload) - offset < need:
        have = max(len(payload) - offset, 0)
        row = have // dtype.itemsize
        col = have - row * dtype.itemsize
        cut = next((p for p, _ in props if dtype.fields[p][1] + dtype.fields[p][0].itemsize > col), props[0][0])
        raise FormatError(
            f"truncated payload: vertex {row} of {count} ends inside property {cut!r} "
            f"({have} of {need} bytes present)"
        )
    data = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)

    def col(*names):
        return np.stack([data[n].astype(np.float64) for n in names], axis=1)

    means = col("x", "y", "z")
    scales = np.exp(col("scale_0", "scale_1", "scale_2"))
    quats = col("rot_0", "rot_1", "rot_2", "rot_3")
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise FormatError("property 'rot_0'..'rot_3': zero-length quaternion")
    quats = quats / norms
    opacities = 1.0 / (1.0 + np.exp(-data["opacity"].astype(np.float64)))
    colors = np.clip(0.5 + SH_C0 * col("f_dc_0", "f_dc_1", "f_dc_2"), 0.0, 1.0)
    return Scene(means, scales, quats, opacities, colors)


def save_gs_ply(scene: Scene, path, extra_properties: dict[str, np.ndarray] | None = None) -> None:
    """Write a checkpoint-style PLY (pre-activation values), float32 properties."""
    with np.errstate(divide="ignore"):
        cols = {
            "x": scene.means[:, 0], "y": scene.means[:, 1], "z": scene.means[:, 2],
            "f_dc_0": (scene.colors[:, 0] - 0.5) / SH_C0,
            "f_dc_1": (scene.colors[:, 1] - 0.5) / SH_C0,
            "f_dc_2": (scene.colors[:, 2] - 0.5) / SH_C0,
            "opacity": np.log(scene.opacities / (1.0 - scene.opacities)),
            "scale_0": np.log(scene.scales[:, 0]),
            "scale_1": np.log(scene.scales[:, 1]),
            "scale_2": np.log(scene.scales[:, 2]),
        }
    for k in range(4):
        cols[f"rot_{k}"] = scene.rotations[:, k]
    for name, values in (extra_properties or {}).items():
        cols[name] = values
    dtype = np.dtype([(name, "<f4") for name in cols])
    data = np.zeros(len(scene), dtype=dtype)
    for name, values in cols.items():
        data[name] = values
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(scene)}"]
    header += [f"property float {name}" for name in cols]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


# ---------------------------------------------------------------------------
# JSON scene / camera files
# ---------------------------------------------------------------------------


def save_scene(scene: Scene, path, note: str | None = None) -> None:
    # json writes floats with repr(), the shortest string that round-trips exactly
    doc = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "gaussians": [
            {
                "mean": scene.means[i].tolist(),
                "scale": scene.scales[i].tolist(),
                "rotation": scene.rotations[i].tolist(),
                "opacity": float(scene.opacities[i]),
                "color": scene.colors[i].tolist(),
            }
            for i in range(len(scene))
        ],
    }
    if note is not None:
        doc["note"] = note
    Path(path).write_text(json.dumps(doc, indent=1))


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def _field(doc, name, kind, length=None):
    if name not in doc:
        raise SchemaError(name, "missing required field")
    value = doc[name]
    if kind == "number":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(name, f"expected a number, got {type(value).__name__}")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaError(name, f"expected an integer, got {value!r}")
        return value
    if not isinstance(value, list) or len(value) != length or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
    ):
        raise SchemaError(name, f"expected a list of {length} numbers")
    return value


def load_scene(path) -> Scene:
    doc = _read_json(path)
    if not isinstance(doc, dict) or doc.get("format") != SCENE_FORMAT:
        raise SchemaError("format", f"expected {SCENE_FORMAT!r}")
    if doc.get("version") != SCENE_VERSION:
        raise SchemaError("version", f"unsupported version {doc.get('version')!r}")
    records = doc.get("gaussians")
    if not isinstance(records, list):
        raise SchemaError("gaussians", "expected a list")
    if not records:
        return Scene.empty()
    cols = {"mean": [], "scale": [], "rotation": [], "opacity": [], "color": []}
    for i, rec in enumerate(records):
        try:
            cols["mean"].append(_field(rec, "mean", "vec", 3))
            cols["scale"].append(_field(rec, "scale", "vec", 3))
            cols["rotation"].append(_field(rec, "rotation", "vec", 4))
            cols["opacity"].append(_field(rec, "opacity", "number"))
            cols["color"].append(_field(rec, "color", "vec", 3))
        except SchemaError as exc:
            raise SchemaError(f"gaussians[{i}].{exc.field}", str(exc).split(": ", 1)[1]) from None
    return Scene(cols["mean"], cols["scale"], cols["rotation"], cols["opacity"], cols["color"])


def camera_to_dict(cam: CameraModel) -> dict:
    return {
        "fx": cam.fx,
        "fy": cam.fy,
        "width": cam.width,
        "height": cam.height,
        "tile_size": cam.tile_size,
        "z_near": cam.z_near,
        "world_to_camera": cam.world_to_camera.reshape(-1).tolist(),
    }


def save_camera(cam: CameraModel, path) -> None:
    Path(path).write_text(json.dumps(camera_to_dict(cam), indent=1))


def camera_from_dict(doc) -> CameraModel:
    if not isinstance(doc, dict):
        raise SchemaError("camera", "expected a JSON object")
    fx = _field(doc, "fx", "number")
    fy = _field(doc, "fy", "number")
    width = _field(doc, "width", "int")
    height = _field(doc, "height", "int")
    tile_size = _field(doc, "tile_size", "int") if "tile_size" in doc else 16
    z_near = _field(doc, "z_near", "number") if "z_near" in doc else 0.2
    w2c = _field(doc, "world_to_camera", "vec", 12)
    try:
        return CameraModel(np.array(w2c, dtype=np.float64).reshape(3, 4), fx, fy, width, height, tile_size, z_near)
    except ValueError as exc:
        raise SchemaError("camera", str(exc)) from exc


def load_camera(path) -> CameraModel:
    return camera_from_dict(_read_json(path))


def load_camera_dir(path) -> list[CameraModel]:
    files = sorted(Path(path).glob("*.json"))
    if not files:
        raise FormatError(f"{path}: no camera *.json files")
    return [load_camera(f) for f in files]


# ---------------------------------------------------------------------------
# images and CSV
# ---------------------------------------------------------------------------


def to_bytes(image: np.ndarray) -> np.ndarray:
    """8-bit quantisation: round(255 * clamp(c, 0, 1)), halves away from zero."""
    v = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def write_image(fb: np.ndarray, path) -> None:
    """Binary PPM (P6)."""
    fb = np.asarray(fb)
    if fb.ndim != 3 or fb.shape[2] != 3:
        raise ValueError(f"framebuffer must be (H, W, 3), got {fb.shape}")
    h, w, _ = fb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(to_bytes(fb).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6" or parts[3] != b"255":
        raise FormatError(f"{path}: not an 8-bit binary PPM")
    w, h = int(parts[1]), int(parts[2])
    pixels = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise FormatError(f"{path}: truncated pixel payload")
    return pixels.reshape(h, w, 3)


def write_timings_csv(timings: StageTimings, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "ms"])
        for name, value in zip(StageTimings.names(), timings.as_list()):
            w.writerow([name, f"{value:.6f}"])


@dataclass
class BenchRow:
    scene_id: str
    strategy: str
    repeat: int
    timings: StageTimings
    total_tiles: int
    n_gaussians: int
    n_visible: int

    @property
    def tiles_per_gaussian(self) -> float:
        return self.total_tiles / self.n_visible if self.n_visible else 0.0


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    HEADER = (["scene_id", "strategy", "repeat"] + [f"{n}_ms" for n in StageTimings.names()]
              + ["total_tiles", "tiles_per_gaussian", "n_gaussians", "n_visible"])

    def mean_overall(self, strategy: str) -> float:
        vals = [r.timings.overall for r in self.rows if r.strategy == strategy]
        return float(np.mean(vals)) if vals else math.nan

    def speedups(self, reference: str = "baseline") -> dict[str, float]:
        ref = self.mean_overall(reference)
        return {s: ref / self.mean_overall(s) for s in dict.fromkeys(r.strategy for r in self.rows)}


def write_csv(report: BenchReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BenchReport.HEADER)
        for r in report.rows:
            w.writerow([r.scene_id, r.strategy, r.repeat] + [f"{v:.6f}" for v in r.timings.as_list()]
                       + [r.total_tiles, f"{r.tiles_per_gaussian:.6f}", r.n_gaussians, r.n_visible])
