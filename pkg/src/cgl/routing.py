"""Module grid, random routing of student paths and sharing-structure utilities."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InvariantError, ParseError, UsageError
from .nn import DenseBlock, Tensor, dense_forward

STRUCTURE_FORMAT = "cgl-structure"
STRUCTURE_VERSION = 1


class ModuleGrid:
    """``L`` layers of ``M`` interchangeable dense blocks.

    All blocks in a layer have the same fan-in/fan-out so any path through the
    grid is well formed; the last layer emits class logits.
    """

    def __init__(self, modules):
        if not modules or not all(modules):
            raise ConfigurationError("grid needs at least one layer with at least one module")
        M = len(modules[0])
        for l, layer in enumerate(modules):
            if len(layer) != M:
                raise ConfigurationError(f"layer {l} has {len(layer)} modules, expected {M}")
            shapes = {(b.fan_in, b.fan_out) for b in layer}
            if len(shapes) != 1:
                raise ConfigurationError(f"layer {l} mixes module shapes {sorted(shapes)}")
            if l > 0 and layer[0].fan_in != modules[l - 1][0].fan_out:
                raise ConfigurationError(
                    f"layer {l} fan_in {layer[0].fan_in} != layer {l - 1} fan_out {modules[l - 1][0].fan_out}"
                )
        self.modules = [list(layer) for layer in modules]

    @classmethod
    def build(cls, rng, in_dim, n_classes, L=4, M=2, width=64):
        dims = [in_dim] + [width] * (L - 1) + [n_classes]
        if L < 1 or M < 1:
            raise ConfigurationError(f"grid needs L >= 1 and M >= 1, got L={L}, M={M}")
        modules = []
        for l in range(L):
            act = "identity" if l == L - 1 else "relu"
            modules.append(
                [DenseBlock.init(rng, dims[l], dims[l + 1], act, name=f"layer{l}.module{m}") for m in range(M)]
            )
        return cls(modules)

    @property
    def L(self):
        return len(self.modules)

    @property
    def M(self):
        return len(self.modules[0])

    @property
    def in_dim(self):
        return self.modules[0][0].fan_in

    @property
    def n_classes(self):
        return self.modules[-1][0].fan_out

    def blocks(self):
        for layer in self.modules:
            yield from layer

    def parameters(self) -> list[Tensor]:
        return [t for block in self.blocks() for t in block.parameters()]

    def parameter_names(self) -> list[str]:
        return [t.name for t in self.parameters()]

    def path_parameters(self, path: "PathMatrix") -> list[Tensor]:
        return [t for l, m in enumerate(path.indices) for t in self.modules[l][m].parameters()]

    def get_arrays(self) -> list[np.ndarray]:
        return [t.data.copy() for t in self.parameters()]

    def set_arrays(self, arrays):
        params = self.parameters()
        if len(arrays) != len(params):
            raise ConfigurationError(f"expected {len(params)} arrays, got {len(arrays)}")
        for t, a in zip(params, arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != t.shape:
                raise ConfigurationError(f"{t.name}: shape {a.shape} != {t.shape}")
            t.data = a.copy()

    def copy(self) -> "ModuleGrid":
        return ModuleGrid(
            [[DenseBlock(b.weight.data.copy(), b.bias.data.copy(), b.activation, b.name) for b in layer]
             for layer in self.modules]
        )


class PathMatrix:
    """Binary ``L x M`` routing matrix with exactly one active module per layer."""

    __slots__ = ("entries",)

    def __init__(self, entries):
        entries = np.asarray(entries)
        if entries.ndim != 2:
            raise InvariantError(f"path matrix must be 2-D, got shape {entries.shape}")
        if not np.isin(entries, (0, 1)).all():
            raise InvariantError("path matrix entries must be 0 or 1")
        sums = entries.sum(axis=1)
        if not (sums == 1).all():
            l = int(np.argmax(sums != 1))
            raise InvariantError(f"path matrix row {l} sums to {int(sums[l])}, expected 1")
        self.entries = entries.astype(np.int8)

    @classmethod
    def from_indices(cls, indices, M):
        indices = np.asarray(indices, dtype=int)
        if ((indices < 0) | (indices >= M)).any():
            raise InvariantError(f"module index out of range [0, {M - 1}] in {indices.tolist()}")
        entries = np.zeros((len(indices), M), dtype=np.int8)
        entries[np.arange(len(indices)), indices] = 1
        return cls(entries)

    @property
    def indices(self) -> tuple:
        return tuple(int(i) for i in self.entries.argmax(axis=1))

    @property
    def L(self):
        return self.entries.shape[0]

    @property
    def M(self):
        return self.entries.shape[1]

    def __eq__(self, other):
        return isinstance(other, PathMatrix) and np.array_equal(self.entries, other.entries)

    def __hash__(self):
        return hash((self.entries.shape, self.indices))

    def __repr__(self):
        return f"PathMatrix({list(self.indices)}, M={self.M})"


@dataclass(frozen=True)
class SharingConstraint:
    """Layers in which every student is pinned to module 0."""

    forced_layers: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "forced_layers", frozenset(int(l) for l in self.forced_layers))

    def validate(self, L):
        bad = sorted(l for l in self.forced_layers if not 0 <= l < L)
        if bad:
            raise ConfigurationError(f"forced layers {bad} outside [0, {L - 1}]")


@dataclass
class StudentPool:
    paths: list
    subset_binding: list = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.paths:
            raise ConfigurationError("a pool needs at least one student")
        if self.subset_binding is None:
            self.subset_binding = list(range(len(self.paths)))
        if sorted(self.subset_binding) != list(range(len(self.paths))):
            raise InvariantError(f"subset binding {self.subset_binding} is not a permutation of 0..K-1")
        shapes = {p.entries.shape for p in self.paths}
        if len(shapes) != 1:
            raise InvariantError(f"paths have differing shapes {sorted(shapes)}")

    @property
    def K(self):
        return len(self.paths)

    @property
    def L(self):
        return self.paths[0].L

    @property
    def M(self):
        return self.paths[0].M


def path_capacity(L: int, M: int) -> int:
    """Number of distinct paths, ``M ** L`` (exact integer)."""
    if L < 1 or M < 1:
        raise ConfigurationError(f"path_capacity needs L, M >= 1, got L={L}, M={M}")
    return int(M) ** int(L)


def sample_path(rng: np.random.Generator, L: int, M: int) -> PathMatrix:
    if L < 1 or M < 1:
        raise ConfigurationError(f"sample_path needs L, M >= 1, got L={L}, M={M}")
    return PathMatrix.from_indices(rng.integers(0, M, size=L), M)


def build_pool(rng, grid, K, constraint=None, distinct=True, seed=None) -> StudentPool:
    """Route ``K`` students through ``grid``.

    ``grid`` may be a ``ModuleGrid`` or an ``(L, M)`` pair. Forced layers are
    pinned to module 0; with ``distinct`` duplicate paths are resampled.
    """
    L, M = (grid.L, grid.M) if isinstance(grid, ModuleGrid) else grid
    constraint = constraint or SharingConstraint()
    constraint.validate(L)
    if K < 1:
        raise ConfigurationError(f"K must be >= 1, got {K}")
    free = [l for l in range(L) if l not in constraint.forced_layers]
    if distinct:
        cap = path_capacity(len(free), M) if free else 1
        if K > cap:
            raise ConfigurationError(
                f"cannot build {K} distinct students: M^L_free = {M}^{len(free)} = {cap}"
            )
    paths, seen = [], set()
    while len(paths) < K:
        idx = np.zeros(L, dtype=int)
        idx[free] = rng.integers(0, M, size=len(free))
        key = tuple(idx)
        if distinct and key in seen:
            continue
        seen.add(key)
        paths.append(PathMatrix.from_indices(idx, M))
    return StudentPool(paths, seed=seed)


def independent_pool(K, L) -> StudentPool:
    """Student ``k`` uses module ``k`` in every layer: no sharing (grid needs ``M = K``)."""
    return StudentPool([PathMatrix.from_indices([k] * L, K) for k in range(K)])


def _check_path(grid: ModuleGrid, path: PathMatrix):
    if not isinstance(path, PathMatrix):
        path = PathMatrix(path)
    if path.entries.shape != (grid.L, grid.M):
        raise InvariantError(f"path shape {path.entries.shape} does not fit grid {(grid.L, grid.M)}")
    return path


def forward_student(grid: ModuleGrid, path, x, track=True, trace=None) -> Tensor:
    """Logits of the student routed by ``path``.

    ``trace``, if a list, receives the input to every layer.
    """
    path = _check_path(grid, path)
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.data.ndim != 2 or h.shape[1] != grid.in_dim:
        raise ConfigurationError(f"input shape {h.shape} does not match grid input dim {grid.in_dim}")
    for l, m in enumerate(path.indices):
        if trace is not None:
            trace.append(h.data.copy())
        h = dense_forward(h, grid.modules[l][m], track=track)
    return h


def predict(grid: ModuleGrid, path, x, batch_size=4096) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = [forward_student(grid, path, x[i:i + batch_size], track=False).data
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, grid.n_classes))


def accuracy(grid: ModuleGrid, path, features, labels) -> float:
    if len(labels) == 0:
        raise ConfigurationError("accuracy on an empty set")
    return float((predict(grid, path, features).argmax(axis=1) == np.asarray(labels)).mean())


def sharing_ratio(a: PathMatrix, b: PathMatrix) -> float:
    """Fraction of layers in which both paths pick the same module."""
    if a.entries.shape != b.entries.shape:
        raise UsageError(f"path shapes differ: {a.entries.shape} vs {b.entries.shape}")
    return float(np.mean(np.array(a.indices) == np.array(b.indices)))


def sharing_matrix(pool: StudentPool) -> np.ndarray:
    K = pool.K
    out = np.ones((K, K))
    for i, j in itertools.combinations(range(K), 2):
        out[i, j] = out[j, i] = sharing_ratio(pool.paths[i], pool.paths[j])
    return out


def mean_sharing_ratio(pool: StudentPool) -> float:
    """Average sharing ratio over unordered student pairs (1.0 for a single student)."""
    if pool.K < 2:
        return 1.0
    pairs = itertools.combinations(pool.paths, 2)
    return float(np.mean([sharing_ratio(a, b) for a, b in pairs]))


def param_count(grid: ModuleGrid) -> int:
    return int(sum(b.n_params() for b in grid.blocks()))


# -------------------------------------------------------- structure descriptor


def serialize_structure(pool: StudentPool) -> str:
    """Text descriptor: header keys, binding, then one binary matrix per path.

    Matrix rows are separated by ``|``, e.g. ``path 0: 1 0 | 0 1``.
    """
    lines = [
        "# student routing structure",
        f"format: {STRUCTURE_FORMAT}",
        f"version: {STRUCTURE_VERSION}",
        f"L: {pool.L}",
        f"M: {pool.M}",
        f"K: {pool.K}",
        f"seed: {'none' if pool.seed is None else pool.seed}",
        "binding: " + " ".join(str(b) for b in pool.subset_binding),
    ]
    for k, path in enumerate(pool.paths):
        rows = " | ".join(" ".join(str(int(v)) for v in row) for row in path.entries)
        lines.append(f"path {k}: {rows}")
    return "\n".join(lines) + "\n"


def _int_field(value, lineno, key):
    try:
        return int(value)
    except ValueError:
        raise ParseError(f"expected an integer, got {value!r}", lineno, key) from None


def load_structure(text: str) -> StudentPool:
    header = {}
    paths = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ParseError(f"expected 'key: value', got {raw!r}", lineno)
        key, value = key.strip(), value.strip()
        if key.startswith("path "):
            k = _int_field(key[5:].strip(), lineno, key)
            if k in paths:
                raise ParseError(f"duplicate path {k}", lineno, key)
            rows = []
            for r, chunk in enumerate(value.split("|")):
                cells = chunk.split()
                try:
                    rows.append([int(c) for c in cells])
                except ValueError:
                    raise ParseError(f"row {r} has a non-integer entry: {chunk.strip()!r}", lineno, key) from None
            paths[k] = (lineno, rows)
        elif key in ("format", "version", "L", "M", "K", "seed", "binding"):
            if key in header:
                raise ParseError(f"duplicate key {key!r}", lineno, key)
            header[key] = (lineno, value)
        else:
            raise ParseError(f"unknown key {key!r}", lineno, key)

    for key in ("format", "version", "L", "M", "K", "seed"):
        if key not in header:
            raise ParseError(f"missing required key {key!r}", field=key)
    lineno, fmt = header["format"]
    if fmt != STRUCTURE_FORMAT:
        raise ParseError(f"unknown format tag {fmt!r}", lineno, "format")
    lineno, version = header["version"]
    if _int_field(version, lineno, "version") != STRUCTURE_VERSION:
        raise ParseError(f"unsupported version {version}", lineno, "version")
    L = _int_field(header["L"][1], header["L"][0], "L")
    M = _int_field(header["M"][1], header["M"][0], "M")
    K = _int_field(header["K"][1], header["K"][0], "K")
    seed_line, seed_text = header["seed"]
    seed = None if seed_text == "none" else _int_field(seed_text, seed_line, "seed")
    if sorted(paths) != list(range(K)):
        raise ParseError(f"expected paths 0..{K - 1}, found {sorted(paths)}", field="path")

    pool_paths = []
    for k in range(K):
        lineno, rows = paths[k]
        if len(rows) != L or any(len(r) != M for r in rows):
            raise ParseError(f"path {k} is not a {L}x{M} matrix", lineno, f"path {k}")
        try:
            pool_paths.append(PathMatrix(rows))
        except InvariantError as err:
            raise ParseError(str(err), lineno, f"path {k}") from None
    binding = None
    if "binding" in header:
        lineno, value = header["binding"]
        binding = [_int_field(v, lineno, "binding") for v in value.split()]
        if sorted(binding) != list(range(K)):
            raise ParseError(f"binding {binding} is not a permutation of 0..{K - 1}", lineno, "binding")
    return StudentPool(pool_paths, binding, seed)


def write_structure(path, pool: StudentPool):
    Path(path).write_text(serialize_structure(pool))


def read_structure(path) -> StudentPool:
    return load_structure(Path(path).read_text())
