"""Graphs, the joint diffusion state, COM projection and prototype tables."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from trajood.errors import ValidationError

LIGAND = 0
POCKET = 1

# ligand atom types and pocket residue types ("METAL" aggregates all metal ions)
LIGAND_ALPHABET = ("C", "N", "O", "S", "B", "Br", "Cl", "P", "I", "F")
POCKET_ALPHABET = (
    "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE", "LEU",
    "LYS", "MET", "PHE", "PRO", "SER", "THR", "TRP", "TYR", "VAL", "METAL",
)
ALPHABET_SIZES = (len(LIGAND_ALPHABET), len(POCKET_ALPHABET))

_CLASS_CODES = {"L": LIGAND, "P": POCKET}
_CLASS_NAMES = {LIGAND: "L", POCKET: "P"}


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ComplexGraph:
    """One attributed 3D graph with ligand-like and pocket-like nodes."""

    node_coords: np.ndarray
    node_types: np.ndarray
    node_class: np.ndarray
    graph_id: str = ""

    def __post_init__(self):
        coords = np.asarray(self.node_coords, dtype=np.float64)
        types = np.asarray(self.node_types, dtype=np.int64)
        cls = np.asarray(self.node_class, dtype=np.int64)
        gid = str(self.graph_id)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValidationError(f"graph {gid!r}: coords must be [n x 3], got {coords.shape}")
        n = coords.shape[0]
        if n < 2:
            raise ValidationError(f"graph {gid!r}: needs at least 2 nodes, got {n}")
        if types.shape != (n,) or cls.shape != (n,):
            raise ValidationError(f"graph {gid!r}: types/class length must equal node count {n}")
        if not np.all(np.isfinite(coords)):
            raise ValidationError(f"graph {gid!r}: non-finite coordinates")
        if np.any((cls != LIGAND) & (cls != POCKET)):
            raise ValidationError(f"graph {gid!r}: node class must be LIGAND or POCKET")
        limits = np.where(cls == LIGAND, ALPHABET_SIZES[LIGAND], ALPHABET_SIZES[POCKET])
        if np.any(types < 0) or np.any(types >= limits):
            raise ValidationError(f"graph {gid!r}: node type outside its class alphabet")
        object.__setattr__(self, "node_coords", _frozen(coords))
        object.__setattr__(self, "node_types", _frozen(types))
        object.__setattr__(self, "node_class", _frozen(cls))
        object.__setattr__(self, "graph_id", gid)

    @property
    def n(self) -> int:
        return self.node_coords.shape[0]

    def to_json(self) -> dict:
        return {
            "id": self.graph_id,
            "coords": self.node_coords.tolist(),
            "types": self.node_types.tolist(),
            "class": [_CLASS_NAMES[int(c)] for c in self.node_class],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ComplexGraph":
        try:
            classes = [_CLASS_CODES[c] for c in obj["class"]]
            return cls(
                node_coords=np.asarray(obj["coords"], dtype=np.float64).reshape(-1, 3),
                node_types=np.asarray(obj["types"], dtype=np.int64),
                node_class=np.asarray(classes, dtype=np.int64),
                graph_id=str(obj["id"]),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed graph record: {exc}") from exc


@dataclass(frozen=True)
class PrototypeTable:
    """Unit-norm embedding prototypes, one row per categorical type."""

    prototypes: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.prototypes, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 1:
            raise ValidationError(f"prototype table must be [V x d], got {p.shape}")
        norms = np.linalg.norm(p, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9, rtol=0.0):
            raise ValidationError("prototype rows must have unit norm")
        object.__setattr__(self, "prototypes", _frozen(p))

    @property
    def V(self) -> int:
        return self.prototypes.shape[0]

    @property
    def d(self) -> int:
        return self.prototypes.shape[1]

    @classmethod
    def normalized(cls, rows) -> "PrototypeTable":
        rows = np.asarray(rows, dtype=np.float64)
        return cls(rows / np.linalg.norm(rows, axis=1, keepdims=True))

    @classmethod
    def random(cls, V: int, d: int, rng: np.random.Generator) -> "PrototypeTable":
        """Rows drawn uniformly on the unit sphere."""
        return cls.normalized(rng.standard_normal((V, d)))


@dataclass(frozen=True)
class JointState:
    """COM-free coordinates concatenated with continuous type embeddings."""

    coords: np.ndarray
    feats: np.ndarray
    t: float = 0.0
    node_class: np.ndarray = field(default=None)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        feats = np.asarray(self.feats, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3 or feats.ndim != 2:
            raise ValidationError("state blocks must be [n x 3] and [n x d]")
        if feats.shape[0] != coords.shape[0]:
            raise ValidationError("coordinate and feature blocks disagree on n")
        if np.abs(coords.mean(axis=0)).max(initial=0.0) > 1e-9 * max(1.0, np.abs(coords).max()):
            raise ValidationError("coordinate block of a JointState must be COM-free")
        if not 0.0 <= float(self.t) <= 1.0:
            raise ValidationError(f"state time must lie in [0, 1], got {self.t}")
        object.__setattr__(self, "coords", _frozen(coords))
        object.__setattr__(self, "feats", _frozen(feats))
        object.__setattr__(self, "t", float(self.t))
        if self.node_class is not None:
            object.__setattr__(self, "node_class", _frozen(np.asarray(self.node_class, dtype=np.int64)))

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def d(self) -> int:
        return self.feats.shape[1]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.coords, self.feats], axis=1)


def com_project(coords: np.ndarray, graph_id: str = "") -> np.ndarray:
    """Subtract the per-column mean so the coordinate block is COM-free."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[0] < 1:
        raise ValidationError(f"graph {graph_id!r}: coords must be a non-empty matrix")
    if not np.all(np.isfinite(coords)):
        raise ValidationError(f"graph {graph_id!r}: non-finite coordinates")
    return coords - coords.mean(axis=0, keepdims=True)


def encode_types(labels: Iterable[int], table: PrototypeTable) -> np.ndarray:
    labels = np.asarray(list(labels), dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= table.V):
        raise ValidationError(f"label outside alphabet of size {table.V}")
    return table.prototypes[labels].copy()


def class_features(types: np.ndarray, node_class: np.ndarray, table_L: PrototypeTable,
                   table_P: PrototypeTable) -> np.ndarray:
    """Embedding rows looked up in the table matching each node's class."""
    if table_L.d != table_P.d:
        raise ValidationError(f"ligand and pocket tables differ in d ({table_L.d} vs {table_P.d})")
    out = np.empty((len(types), table_L.d))
    lig = node_class == LIGAND
    out[lig] = encode_types(types[lig], table_L)
    out[~lig] = encode_types(types[~lig], table_P)
    return out


def assemble_state(graph: ComplexGraph, table_L: PrototypeTable, table_P: PrototypeTable) -> JointState:
    if table_L.V != ALPHABET_SIZES[LIGAND] or table_P.V != ALPHABET_SIZES[POCKET]:
        raise ValidationError("table sizes do not match the ligand/pocket alphabets")
    feats = class_features(graph.node_types, graph.node_class, table_L, table_P)
    coords = com_project(graph.node_coords, graph.graph_id)
    return JointState(coords=coords, feats=feats, t=0.0, node_class=graph.node_class)


def write_jsonl(graphs: Iterable[ComplexGraph], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(json.dumps(g.to_json(), separators=(",", ":")))
            fh.write("\n")


def iter_jsonl(path) -> Iterator[ComplexGraph]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"graph file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            try:
                yield ComplexGraph.from_json(obj)
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc


def read_jsonl(path) -> list[ComplexGraph]:
    return list(iter_jsonl(path))
