"""Binary and text containers: .dms sequences, OBJ frames, text embeddings, checkpoints.

All binary layouts are little-endian. Parse failures raise :class:`FormatError`
carrying the byte offset (binary) or line number (text) of the problem.
"""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from .config import dump_kv, parse_kv
from .mesh import DynamicMeshSequence, TriangleMesh

DMS_MAGIC = b"DMS1"
DMS_VERSION = 1
TEMB_MAGIC = b"TEMB"
CKPT_MAGIC = b"DMVW"
CKPT_VERSION = 1

_FRAME_RE = re.compile(r"frame_(\d+)\.obj$")


class FormatError(ValueError):
    def __init__(self, message: str, path: str | Path | None = None, offset: int | None = None,
                 line: int | None = None):
        where = str(path) if path is not None else "<bytes>"
        if offset is not None:
            where += f" @byte {offset}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}")
        self.path, self.offset, self.line = path, offset, line


class TopologyError(ValueError):
    pass


class _Reader:
    def __init__(self, data: bytes, path=None):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {what}: need {n} bytes, have {len(self.data) - self.pos}",
                              self.path, self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(count * dt.itemsize, what), dtype=dt).copy()

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected), "magic")
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}", self.path, 0)

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{len(self.data) - self.pos} trailing bytes", self.path, self.pos)


# -- .dms ------------------------------------------------------------------------

def dms_bytes(seq: DynamicMeshSequence) -> bytes:
    t, n, _ = seq.frames.shape
    head = DMS_MAGIC + struct.pack("<IIII", DMS_VERSION, t, n, seq.n_faces)
    return head + seq.faces.astype("<u4").tobytes() + seq.frames.astype("<f4").tobytes()


def write_dms(seq: DynamicMeshSequence, path: str | Path) -> None:
    Path(path).write_bytes(dms_bytes(seq))


def parse_dms(data: bytes, path=None) -> DynamicMeshSequence:
    r = _Reader(data, path)
    r.magic(DMS_MAGIC)
    version_at = r.pos
    version = r.u32("version")
    if version != DMS_VERSION:
        raise FormatError(f"unsupported version {version}", path, version_at)
    t, n, m = r.u32("frame count"), r.u32("vertex count"), r.u32("face count")
    faces_at = r.pos
    faces = r.array("<u4", m * 3, "face indices").astype(np.int64).reshape(m, 3)
    if m and faces.max() >= n:
        bad = int(np.argmax(faces.reshape(-1) >= n))
        raise FormatError(f"face index {faces.reshape(-1)[bad]} >= vertex count {n}", path, faces_at + 4 * bad)
    frames = r.array("<f4", t * n * 3, "positions").astype(np.float64).reshape(t, n, 3)
    r.finish()
    return DynamicMeshSequence(faces, frames)


def read_dms(path: str | Path) -> DynamicMeshSequence:
    return parse_dms(Path(path).read_bytes(), path)


# -- OBJ -----------------------------------------------------------------------

def parse_obj(text: str, path=None) -> TriangleMesh:
    """Read ``v`` and triangular ``f`` records; everything else is ignored."""
    verts, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        tag, rest = parts[0], parts[1:]
        try:
            if tag == "v":
                if len(rest) < 3:
                    raise ValueError("vertex needs three coordinates")
                verts.append([float(x) for x in rest[:3]])
            elif tag == "f":
                if len(rest) != 3:
                    raise ValueError(f"only triangles are supported, got {len(rest)} corners")
                idx = [int(tok.split("/")[0]) for tok in rest]
                if min(idx) < 1:
                    raise ValueError("face indices are 1-based and positive")
                faces.append([i - 1 for i in idx])
        except ValueError as exc:
            raise FormatError(str(exc), path, line=lineno) from None
    try:
        return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                            np.array(faces, dtype=np.int64).reshape(-1, 3))
    except IndexError as exc:
        raise FormatError(str(exc), path) from None


def read_obj(path: str | Path) -> TriangleMesh:
    return parse_obj(Path(path).read_text(encoding="utf-8"), path)


def obj_text(mesh: TriangleMesh) -> str:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    return "\n".join(lines) + "\n"


def write_obj(mesh: TriangleMesh, path: str | Path) -> None:
    Path(path).write_text(obj_text(mesh), encoding="utf-8")


def obj_frames(directory: str | Path) -> list[Path]:
    files = [p for p in Path(directory).iterdir() if _FRAME_RE.search(p.name)]
    return sorted(files, key=lambda p: int(_FRAME_RE.search(p.name).group(1)))


def read_obj_sequence(directory: str | Path) -> DynamicMeshSequence:
    files = obj_frames(directory)
    if not files:
        raise FormatError("no frame_XXXX.obj files", directory)
    meshes = [read_obj(p) for p in files]
    ref = meshes[0]
    for p, m in zip(files[1:], meshes[1:]):
        if m.faces.shape != ref.faces.shape or not np.array_equal(m.faces, ref.faces):
            raise TopologyError(f"{p}: face list differs from {files[0].name}")
        if m.n_vertices != ref.n_vertices:
            raise TopologyError(f"{p}: {m.n_vertices} vertices, expected {ref.n_vertices}")
    return DynamicMeshSequence(ref.faces, np.stack([m.vertices for m in meshes]))


def write_obj_sequence(seq: DynamicMeshSequence, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t in range(seq.n_frames):
        write_obj(seq.mesh(t), directory / f"frame_{t:04d}.obj")


def read_mesh(path: str | Path) -> TriangleMesh:
    """Static mesh from an OBJ file or frame 0 of a .dms container."""
    path = Path(path)
    if path.suffix.lower() == ".dms":
        return read_dms(path).mesh(0)
    return read_obj(path)


def read_sequence(path: str | Path) -> DynamicMeshSequence:
    path = Path(path)
    if path.is_dir():
        return read_obj_sequence(path)
    if path.suffix.lower() == ".dms":
        return read_dms(path)
    if path.suffix.lower() == ".obj":
        return DynamicMeshSequence.static(read_obj(path), 1)
    raise FormatError("unsupported sequence format", path)


# -- text embeddings ---------------------------------------------------------------

def temb_bytes(emb: np.ndarray) -> bytes:
    emb = np.asarray(emb, dtype=np.float64)
    emb = emb.reshape(1, -1) if emb.ndim == 1 else emb
    return TEMB_MAGIC + struct.pack("<II", *emb.shape) + emb.astype("<f8").tobytes()


def write_temb(emb: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(temb_bytes(emb))


def parse_temb(data: bytes, path=None) -> np.ndarray:
    r = _Reader(data, path)
    r.magic(TEMB_MAGIC)
    count, dim = r.u32("count"), r.u32("dim")
    values = r.array("<f8", count * dim, "embedding values").reshape(count, dim)
    r.finish()
    return values


def read_temb(path: str | Path) -> np.ndarray:
    return parse_temb(Path(path).read_bytes(), path)


# -- checkpoints -------------------------------------------------------------------

def checkpoint_bytes(config: dict[str, str], tensors: dict[str, np.ndarray]) -> bytes:
    text = dump_kv(config).encode("utf-8")
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(text)), text, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        key = name.encode("utf-8")
        out.append(struct.pack("<I", len(key)) + key)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.astype("<f8").tobytes())
    return b"".join(out)


def write_checkpoint(config: dict[str, str], tensors: dict[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(config, tensors))


def parse_checkpoint(data: bytes, path=None) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    r = _Reader(data, path)
    r.magic(CKPT_MAGIC)
    version_at = r.pos
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path, version_at)
    text_at = r.pos + 4
    raw = r.take(r.u32("config length"), "config block")
    try:
        config = parse_kv(raw.decode("utf-8"), f"{path or '<bytes>'} config")
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"bad config block: {exc}", path, text_at) from None
    tensors = {}
    for _ in range(r.u32("tensor count")):
        name_at = r.pos
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8", errors="replace")
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}", path, name_at)
        ndim = r.u32("rank")
        shape = tuple(r.u32("dimension") for _ in range(ndim))
        tensors[name] = r.array("<f8", int(np.prod(shape, dtype=np.int64)), f"tensor {name}").reshape(shape)
    r.finish()
    return config, tensors


def read_checkpoint(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    return parse_checkpoint(Path(path).read_bytes(), path)
