"""Synthetic graph families built from rigid point motifs.

A family mixes a few templates. Each template is a rigid arrangement of
ligand-like nodes (a core plus optional substituents) inside a shell of
pocket-like nodes. Node types are drawn per structural role, which ties the
type labels to the geometry. OOD variants swap templates (geometric shift),
distort the role type-marginals (chemical shift), or both.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from trajood.errors import ValidationError
from trajood.graph import ALPHABET_SIZES, LIGAND, POCKET, ComplexGraph

CORE, SUBST, SHELL = 0, 1, 2
ROLE_NAMES = ("core", "substituent", "pocket")


@dataclass
class Template:
    name: str
    coords: np.ndarray
    node_class: np.ndarray
    role: np.ndarray
    optional: np.ndarray

    @property
    def n(self) -> int:
        return len(self.coords)


def _ring(k: int, bond: float) -> np.ndarray:
    r = bond / (2 * np.sin(np.pi / k))
    a = 2 * np.pi * np.arange(k) / k
    return np.stack([r * np.cos(a), r * np.sin(a), np.zeros(k)], axis=1)


def _chain(k: int, bond: float, angle_deg: float = 120.0) -> np.ndarray:
    half = np.deg2rad(angle_deg) / 2
    dx, dy = bond * np.sin(half), bond * np.cos(half)
    pts = [[i * dx, (i % 2) * dy, 0.0] for i in range(k)]
    pts = np.array(pts)
    return pts - pts.mean(axis=0)


def _star(k: int, bond: float) -> np.ndarray:
    dirs = Rotation.from_rotvec([0.3, 0.5, 0.1]).apply(
        np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1], [1, 0, 0], [0, 1, 0]], dtype=float)[: k - 1])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return np.vstack([[0.0, 0.0, 0.0], bond * dirs])


def _shell(k: int, radius: float, offset: float = 0.0) -> np.ndarray:
    """Quasi-uniform points on a sphere (Fibonacci lattice)."""
    i = np.arange(k) + 0.5
    phi = np.arccos(1 - 2 * i / k)
    theta = np.pi * (1 + 5**0.5) * i + offset
    return radius * np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def _substituents(core: np.ndarray, which, bond: float) -> np.ndarray:
    c = core.mean(axis=0)
    out = []
    for i in which:
        v = core[i] - c
        n = np.linalg.norm(v)
        v = v / n if n > 1e-9 else np.array([0.0, 0.0, 1.0])
        out.append(core[i] + bond * v)
    return np.array(out).reshape(-1, 3)


def build_template(name: str, core: str = "ring6", core_size: int = 6, bond: float = 1.4,
                   n_subst: int = 3, subst_bond: float = 1.5, pocket_size: int = 5,
                   pocket_radius: float = 4.5, optional_pocket: int = 1) -> Template:
    if core == "ring":
        core_xyz = _ring(core_size, bond)
    elif core == "chain":
        core_xyz = _chain(core_size, bond)
    elif core == "star":
        core_xyz = _star(core_size, bond)
    else:
        raise ValidationError(f"unknown core motif {core!r}")
    which = np.linspace(0, core_size, n_subst, endpoint=False).astype(int) if n_subst else []
    subs = _substituents(core_xyz, which, subst_bond)
    shell = _shell(pocket_size, pocket_radius)
    coords = np.vstack([core_xyz, subs, shell])
    cls = np.array([LIGAND] * (len(core_xyz) + len(subs)) + [POCKET] * pocket_size)
    role = np.array([CORE] * len(core_xyz) + [SUBST] * len(subs) + [SHELL] * pocket_size)
    optional = np.zeros(len(coords), dtype=bool)
    optional[len(core_xyz):len(core_xyz) + len(subs)] = True
    if optional_pocket:
        optional[len(coords) - optional_pocket:] = True
    return Template(name, coords, cls, role, optional)


TEMPLATE_PRESETS = {
    "ring6": dict(core="ring", core_size=6, bond=1.4, n_subst=3, pocket_size=5, pocket_radius=4.5),
    "ring5": dict(core="ring", core_size=5, bond=1.4, n_subst=2, pocket_size=5, pocket_radius=4.5),
    "chain6": dict(core="chain", core_size=6, bond=1.5, n_subst=2, pocket_size=5, pocket_radius=5.5),
    "star5": dict(core="star", core_size=5, bond=1.5, n_subst=0, pocket_size=5, pocket_radius=3.5),
    "ring7_wide": dict(core="ring", core_size=7, bond=1.7, n_subst=3, pocket_size=5, pocket_radius=6.0),
}

# role type-marginals over each class alphabet (ligand: C N O S B Br Cl P I F)
DEFAULT_MARGINALS = {
    "core": [0.62, 0.22, 0.10, 0.03, 0.0, 0.0, 0.0, 0.03, 0.0, 0.0],
    "substituent": [0.10, 0.20, 0.35, 0.05, 0.0, 0.05, 0.10, 0.0, 0.0, 0.15],
    "pocket": [0.08, 0.06, 0.05, 0.07, 0.02, 0.04, 0.06, 0.08, 0.05, 0.06, 0.08,
               0.06, 0.02, 0.05, 0.03, 0.05, 0.04, 0.02, 0.04, 0.07, 0.03],
}


@dataclass
class SyntheticFamilySpec:
    name: str = "id"
    templates: list = field(default_factory=lambda: ["ring6", "ring5"])
    weights: list = field(default_factory=lambda: [0.5, 0.5])
    jitter: float = 0.1
    node_count_range: tuple = (7, 14)
    marginals: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_MARGINALS))
    distortion: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if len(self.templates) != len(self.weights) or not self.templates:
            raise ValidationError("templates and weights must be non-empty and of equal length")
        if abs(sum(self.weights) - 1.0) > 1e-9 or min(self.weights) < 0:
            raise ValidationError("motif weights must be non-negative and sum to 1")
        if self.jitter < 0:
            raise ValidationError("jitter must be non-negative")
        self.node_count_range = tuple(self.node_count_range)
        for t in self.templates:
            if isinstance(t, str) and t not in TEMPLATE_PRESETS:
                raise ValidationError(f"unknown template preset {t!r}")

    def role_marginals(self) -> dict[str, np.ndarray]:
        """Role type-marginals after applying the distortion (mixture weight ``lam`` towards ``target``)."""
        out = {}
        for role, base in self.marginals.items():
            p = np.asarray(base, dtype=np.float64)
            if role in self.distortion:
                spec = self.distortion[role]
                q = np.asarray(spec["target"], dtype=np.float64)
                p = (1 - spec["lam"]) * p / p.sum() + spec["lam"] * q / q.sum()
            size = ALPHABET_SIZES[POCKET] if role == "pocket" else ALPHABET_SIZES[LIGAND]
            if len(p) != size or np.any(p < 0) or p.sum() <= 0:
                raise ValidationError(f"bad type marginal for role {role!r}")
            out[role] = p / p.sum()
        return out

    def to_dict(self) -> dict:
        return {
            "name": self.name, "templates": list(self.templates), "weights": list(self.weights),
            "jitter": self.jitter, "node_count_range": list(self.node_count_range),
            "marginals": self.marginals, "distortion": self.distortion, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticFamilySpec":
        return cls(**d)


def _resolve(t) -> Template:
    if isinstance(t, Template):
        return t
    return build_template(t, **TEMPLATE_PRESETS[t])


def generate_family(spec: SyntheticFamilySpec, count: int, prefix: str | None = None) -> list[ComplexGraph]:
    if count < 1:
        raise ValidationError("count must be at least 1")
    rng = np.random.default_rng(spec.seed)
    templates = [_resolve(t) for t in spec.templates]
    marg = spec.role_marginals()
    lo, hi = spec.node_count_range
    prefix = spec.name if prefix is None else prefix
    graphs = []
    for i in range(count):
        tpl = templates[rng.choice(len(templates), p=spec.weights)]
        n_req = tpl.n - int(tpl.optional.sum())
        n_max = tpl.n
        lo_i, hi_i = max(lo, n_req), min(hi, n_max)
        if lo_i > hi_i:
            raise ValidationError(f"template {tpl.name!r} cannot meet node range {spec.node_count_range}")
        n = int(rng.integers(lo_i, hi_i + 1))
        opt = np.flatnonzero(tpl.optional)
        keep_opt = rng.choice(opt, size=n - n_req, replace=False) if n > n_req else np.array([], dtype=int)
        keep = np.sort(np.concatenate([np.flatnonzero(~tpl.optional), keep_opt])).astype(int)
        coords = tpl.coords[keep] + spec.jitter * rng.standard_normal((len(keep), 3))
        R = Rotation.random(random_state=rng).as_matrix()
        coords = coords @ R.T + rng.uniform(-5, 5, size=3)
        roles = tpl.role[keep]
        types = np.empty(len(keep), dtype=np.int64)
        for role_id, role_name in enumerate(ROLE_NAMES):
            sel = roles == role_id
            if sel.any():
                p = marg[role_name]
                types[sel] = rng.choice(len(p), size=int(sel.sum()), p=p)
        graphs.append(ComplexGraph(coords, types, tpl.node_class[keep], f"{prefix}-{i:05d}"))
    return graphs


def type_marginals(graphs: list[ComplexGraph]) -> tuple[np.ndarray, np.ndarray]:
    """Empirical ligand and pocket type histograms (normalised)."""
    cls = np.concatenate([g.node_class for g in graphs])
    types = np.concatenate([g.node_types for g in graphs])
    lig = np.bincount(types[cls == LIGAND], minlength=ALPHABET_SIZES[LIGAND]).astype(float)
    poc = np.bincount(types[cls == POCKET], minlength=ALPHABET_SIZES[POCKET]).astype(float)
    return lig / max(lig.sum(), 1), poc / max(poc.sum(), 1)


def id_family(seed: int = 0, **kw) -> SyntheticFamilySpec:
    return SyntheticFamilySpec(name=kw.pop("name", "id"), seed=seed, **kw)


def geometric_shift(seed: int = 1, **kw) -> SyntheticFamilySpec:
    """Motif substitution: chain and star cores in tighter or wider shells."""
    return SyntheticFamilySpec(name=kw.pop("name", "ood-geom"), templates=["chain6", "star5"],
                               weights=[0.5, 0.5], seed=seed, **kw)


def chemical_shift(seed: int = 2, lam: float = 0.8, **kw) -> SyntheticFamilySpec:
    """Same motifs as the ID family with core/substituent types pushed to rare elements."""
    target_core = [0.05, 0.05, 0.05, 0.35, 0.1, 0.0, 0.0, 0.30, 0.0, 0.1]
    target_sub = [0.0, 0.0, 0.05, 0.15, 0.10, 0.30, 0.0, 0.0, 0.40, 0.0]
    distortion = {"core": {"lam": lam, "target": target_core}, "substituent": {"lam": lam, "target": target_sub}}
    return SyntheticFamilySpec(name=kw.pop("name", "ood-chem"), seed=seed, distortion=distortion, **kw)
