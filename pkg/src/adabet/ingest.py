"""Activation exchange: strict NPY v1.0 tensors, layer metadata, pooling.

Dump directories hold one file per layer per batch, named
``layer{index:04d}_batch{b:04d}.npy``, optional gradient companions with a
``.grad.npy`` suffix, and a ``meta.json`` describing the layers.  The NPY
reader and writer accept exactly version 1.0, little-endian float32/float64,
C order; everything else is rejected with a pointed message rather than
passed along to fail later.
"""

import ast
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

NPY_MAGIC = b"\x93NUMPY"
_DESCR_TO_DTYPE = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}
_HEADER_ALIGN = 64

DEFAULT_POOL_CAP = 64
DEFAULT_POOL_SEED = 42

_ACT_RE = re.compile(r"^layer(\d{4})_batch(\d{4})\.npy$")
_GRAD_RE = re.compile(r"^layer(\d{4})_batch(\d{4})\.grad\.npy$")


@dataclass(frozen=True)
class Tensor:
    """A dense little-endian real tensor; axis 0 is the batch axis by
    convention.  data is the flat row-major payload in the stated dtype."""

    shape: tuple
    dtype: str  # "f32" or "f64"
    data: np.ndarray

    def as_matrix(self):
        """Rows = samples, columns = flattened per-sample elements (f64)."""
        if len(self.shape) < 1:
            raise DataError("tensor has no batch axis")
        rows = self.shape[0]
        return self.data.astype(np.float64).reshape(rows, -1)

    @property
    def elems_per_sample(self):
        n = 1
        for s in self.shape[1:]:
            n *= s
        return n


@dataclass(frozen=True)
class LayerMeta:
    """Description of one exportable layer of the source model."""

    index: int
    name: str
    trainable: bool
    param_count: int
    act_elems_per_sample: int
    group_id: str | None = None


@dataclass
class ActivationPool:
    """Pooled per-sample activation rows for one layer."""

    layer_index: int
    matrix: np.ndarray  # (N, D) float64
    source_batches: list = field(default_factory=list)  # (source id, rows)
    seed: int = DEFAULT_POOL_SEED


def tensor_from_array(arr):
    """Wrap a numpy float array as a Tensor, preserving f32 vs f64."""
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        dtype = "f32"
    elif arr.dtype == np.float64:
        dtype = "f64"
    else:
        raise DataError("only float32/float64 arrays are supported, got %s" % arr.dtype)
    return Tensor(tuple(int(s) for s in arr.shape), dtype, np.ascontiguousarray(arr).reshape(-1))


def read_npy(buf):
    """Parse NPY v1.0 bytes into a Tensor.

    Rejects wrong magic, any version other than 1.0, dtypes other than
    little-endian f4/f8, Fortran order, malformed headers, payload length
    mismatches, and non-finite values.
    """
    if len(buf) < 10:
        raise DataError("NPY data truncated before header")
    if buf[:6] != NPY_MAGIC:
        raise DataError("bad NPY magic: %r" % buf[:6])
    major, minor = buf[6], buf[7]
    if (major, minor) != (1, 0):
        raise DataError("unsupported NPY version %d.%d (only 1.0 accepted)" % (major, minor))
    (header_len,) = struct.unpack("<H", buf[8:10])
    if len(buf) < 10 + header_len:
        raise DataError("NPY data truncated inside header")
    header_text = buf[10:10 + header_len].decode("latin1")
    try:
        header = ast.literal_eval(header_text)
    except (ValueError, SyntaxError) as exc:
        raise DataError("malformed NPY header: %s" % exc) from exc
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise DataError("malformed NPY header: expected descr/fortran_order/shape")
    descr = header["descr"]
    if descr not in _DESCR_TO_DTYPE:
        raise DataError("unsupported NPY dtype %r (only <f4 and <f8 accepted)" % (descr,))
    if header["fortran_order"] is not False:
        raise DataError("Fortran-ordered NPY payloads are not supported")
    shape = header["shape"]
    if not isinstance(shape, tuple) or not all(isinstance(s, int) and s >= 0 for s in shape):
        raise DataError("malformed NPY shape %r" % (shape,))
    dtype = _DESCR_TO_DTYPE[descr]
    count = 1
    for s in shape:
        count *= s
    payload = buf[10 + header_len:]
    if len(payload) != count * dtype.itemsize:
        raise DataError(
            "NPY payload length %d does not match shape %r (%d bytes expected)"
            % (len(payload), shape, count * dtype.itemsize)
        )
    data = np.frombuffer(payload, dtype=dtype).copy()
    if not np.isfinite(data).all():
        bad = int(np.flatnonzero(~np.isfinite(data))[0])
        raise DataError("non-finite value in NPY payload at flat index %d" % bad)
    return Tensor(tuple(shape), "f32" if descr == "<f4" else "f64", data)


def write_npy(tensor):
    """Serialize a Tensor to NPY v1.0 bytes.

    The header dict is spelled the way numpy spells it and space-padded so
    the payload starts on a 64-byte boundary; identical tensors produce
    identical bytes.
    """
    descr = "<f4" if tensor.dtype == "f32" else "<f8"
    if tensor.dtype not in ("f32", "f64"):
        raise DataError("unsupported tensor dtype %r" % (tensor.dtype,))
    count = 1
    for s in tensor.shape:
        if s < 0:
            raise DataError("negative dimension in shape %r" % (tensor.shape,))
        count *= s
    if tensor.data.size != count:
        raise DataError(
            "payload has %d elements but shape %r needs %d"
            % (tensor.data.size, tensor.shape, count)
        )
    if not np.isfinite(tensor.data).all():
        raise DataError("refusing to serialize non-finite values")
    header = "{'descr': '%s', 'fortran_order': False, 'shape': %s, }" % (
        descr,
        repr(tuple(tensor.shape)),
    )
    pad = -(len(NPY_MAGIC) + 2 + 2 + len(header) + 1) % _HEADER_ALIGN
    header = header + " " * pad + "\n"
    if len(header) > 0xFFFF:
        raise DataError("NPY header too long for version 1.0")
    out = bytearray()
    out += NPY_MAGIC
    out += bytes((1, 0))
    out += struct.pack("<H", len(header))
    out += header.encode("latin1")
    out += tensor.data.astype(_DESCR_TO_DTYPE[descr], copy=False).tobytes(order="C")
    return bytes(out)


def load_layer_meta(text):
    """Parse and validate meta.json content into LayerMeta records.

    The result is sorted by index; indices must be unique and contiguous
    from 0.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError("meta.json is not valid JSON: %s" % exc) from exc
    if not isinstance(raw, list):
        raise DataError("meta.json must be a JSON array of layer records")
    metas = []
    seen = set()
    for k, rec in enumerate(raw):
        if not isinstance(rec, dict):
            raise DataError("meta.json entry %d is not an object" % k)
        try:
            index = rec["index"]
            name = rec["name"]
            trainable = rec["trainable"]
            param_count = rec["param_count"]
            act_elems = rec["act_elems_per_sample"]
        except KeyError as exc:
            raise DataError("meta.json entry %d is missing field %s" % (k, exc)) from exc
        group_id = rec.get("group_id")
        if not isinstance(index, int) or index < 0:
            raise DataError("meta.json entry %d: index must be a non-negative integer" % k)
        if index in seen:
            raise DataError("meta.json: duplicate layer index %d" % index)
        seen.add(index)
        if not isinstance(name, str) or not name:
            raise DataError("meta.json entry %d: name must be a non-empty string" % k)
        if not isinstance(trainable, bool):
            raise DataError("meta.json entry %d: trainable must be a boolean" % k)
        if not isinstance(param_count, int) or param_count < 0:
            raise DataError("meta.json entry %d: param_count must be a non-negative integer" % k)
        if not isinstance(act_elems, int) or act_elems < 1:
            raise DataError("meta.json entry %d: act_elems_per_sample must be >= 1" % k)
        if group_id is not None and (not isinstance(group_id, str) or not group_id):
            raise DataError("meta.json entry %d: group_id must be null or a non-empty string" % k)
        metas.append(LayerMeta(index, name, trainable, param_count, act_elems, group_id))
    metas.sort(key=lambda m: m.index)
    if [m.index for m in metas] != list(range(len(metas))):
        raise DataError("meta.json: layer indices must be contiguous from 0")
    return metas


def accumulate_pool(batches, meta, pool_cap=DEFAULT_POOL_CAP, seed=DEFAULT_POOL_SEED,
                    sources=None):
    """Stack batch tensors into one (N, D) pool for a layer.

    Every batch must flatten to meta.act_elems_per_sample columns; float32
    payloads are upcast to float64.  If the stack exceeds pool_cap rows, a
    seeded uniform subsample of exactly pool_cap rows is kept, preserving the
    original row order.
    """
    if pool_cap < 1:
        raise DataError("pool_cap must be >= 1, got %d" % pool_cap)
    if not batches:
        raise DataError("no batches to pool for layer %d" % meta.index)
    if sources is None:
        sources = ["batch%04d" % b for b in range(len(batches))]
    mats = []
    recorded = []
    for src, t in zip(sources, batches):
        m = t.as_matrix()
        if m.shape[1] != meta.act_elems_per_sample:
            raise DataError(
                "layer %d (%s): batch %s has %d elements per sample, meta says %d"
                % (meta.index, meta.name, src, m.shape[1], meta.act_elems_per_sample)
            )
        mats.append(m)
        recorded.append((src, m.shape[0]))
    stacked = np.concatenate(mats, axis=0)
    if stacked.shape[0] < 1:
        raise DataError("layer %d: pooled zero rows" % meta.index)
    if stacked.shape[0] > pool_cap:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(stacked.shape[0], size=pool_cap, replace=False))
        stacked = stacked[keep]
    return ActivationPool(meta.index, stacked, recorded, seed)


def read_meta_file(dump_dir):
    path = Path(dump_dir) / "meta.json"
    if not path.is_file():
        raise DataError("missing meta.json in %s" % dump_dir)
    return load_layer_meta(path.read_text())


def scan_dump_dir(dump_dir, kind="act"):
    """Map layer index -> sorted batch files of the requested kind.

    kind is "act" for activation dumps or "grad" for gradient companions.
    Returns (mapping, warnings); unrecognized *.npy files are reported as
    warnings, never read.
    """
    root = Path(dump_dir)
    if not root.is_dir():
        raise DataError("dump directory %s does not exist" % dump_dir)
    pattern = _ACT_RE if kind == "act" else _GRAD_RE
    other = _GRAD_RE if kind == "act" else _ACT_RE
    layers = {}
    warnings = []
    for path in sorted(root.iterdir()):
        if not path.name.endswith(".npy"):
            continue
        m = pattern.match(path.name)
        if m:
            layers.setdefault(int(m.group(1)), []).append((int(m.group(2)), path))
            continue
        if not other.match(path.name):
            warnings.append("ignoring unrecognized file %s" % path.name)
    for idx in layers:
        layers[idx].sort()
    return layers, warnings


def load_layer_pool(dump_dir, meta, pool_cap=DEFAULT_POOL_CAP, seed=DEFAULT_POOL_SEED):
    """Read one trainable layer's activation batches and pool them."""
    layers, _ = scan_dump_dir(dump_dir, kind="act")
    if meta.index not in layers:
        raise DataError("no activation dumps for layer %d (%s)" % (meta.index, meta.name))
    batches, sources = [], []
    for b, path in layers[meta.index]:
        batches.append(read_npy(path.read_bytes()))
        sources.append(path.name)
    return accumulate_pool(batches, meta, pool_cap=pool_cap, seed=seed, sources=sources)


def load_layer_batches(dump_dir, meta, with_grads=False):
    """Read one layer's batches (and gradient companions when asked for)
    concatenated along the batch axis, without pooling."""
    layers, _ = scan_dump_dir(dump_dir, kind="act")
    if meta.index not in layers:
        raise DataError("no activation dumps for layer %d (%s)" % (meta.index, meta.name))
    acts, grads = [], []
    for b, path in layers[meta.index]:
        t = read_npy(path.read_bytes())
        m = t.as_matrix()
        if m.shape[1] != meta.act_elems_per_sample:
            raise DataError(
                "layer %d (%s): dump %s has %d elements per sample, meta says %d"
                % (meta.index, meta.name, path.name, m.shape[1], meta.act_elems_per_sample)
            )
        acts.append(m)
        if with_grads:
            gpath = path.with_name(path.name[:-4] + ".grad.npy")
            if not gpath.is_file():
                raise DataError(
                    "layer %d (%s): missing gradient companion %s"
                    % (meta.index, meta.name, gpath.name)
                )
            g = read_npy(gpath.read_bytes()).as_matrix()
            if g.shape != m.shape:
                raise DataError(
                    "layer %d (%s): gradient %s shape %s does not match activations %s"
                    % (meta.index, meta.name, gpath.name, g.shape, m.shape)
                )
            grads.append(g)
    act = np.concatenate(acts, axis=0)
    if with_grads:
        return act, np.concatenate(grads, axis=0)
    return act, None


def validate_dump_dir(dump_dir, metas):
    """Cross-check a dump directory against its metadata.

    Returns a list of warning strings; raises DataError on hard problems
    (missing dumps for a trainable layer, column-count mismatches, dumps for
    unknown layer indices).
    """
    layers, warnings = scan_dump_dir(dump_dir, kind="act")
    by_index = {m.index: m for m in metas}
    for idx in sorted(layers):
        if idx not in by_index:
            raise DataError("dumps present for layer %d but meta.json does not list it" % idx)
        meta = by_index[idx]
        if not meta.trainable:
            warnings.append(
                "layer %d (%s) is not trainable; its dumps are ignored" % (idx, meta.name)
            )
            continue
        for b, path in layers[idx]:
            t = read_npy(path.read_bytes())
            if t.elems_per_sample != meta.act_elems_per_sample:
                raise DataError(
                    "layer %d (%s): dump %s has %d elements per sample, meta says %d"
                    % (idx, meta.name, path.name, t.elems_per_sample,
                       meta.act_elems_per_sample)
                )
    for meta in metas:
        if meta.trainable and meta.index not in layers:
            raise DataError(
                "trainable layer %d (%s) has no activation dumps" % (meta.index, meta.name)
            )
    return warnings
