"""Species, reactions, rate factors and the configuration file format.

A configuration is a YAML document::

    domain:  {lo: [-1.0], hi: [1.0]}
    kernel:  {epsilon: 0.1, family: epanechnikov}
    scaling: {N: 100}
    species:
      - {name: S, locality: diffusive, abundance: big, sigma2: 0.05}
      - {name: M, locality: localized, anchor: [0.0], abundance: small}
    reactions:
      - name: birth
        sources: []
        products: [M]
        localized_at: [0.0]
        rate: {kind: hill_repress, c1: 2.0, c2: 1.0, k: 2,
               mass: {targets: [S], radius: 0.2}}
      - name: translation
        sources: [M]
        products: [M, S]
        consume: [false]
        rate: {kind: constant, c: 1.0, scale_exponent: 1}

Optional top-level blocks ``initial``, ``solver`` and ``experiment`` are
kept verbatim for the simulators and the command line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .errors import ValidationError
from .geometry import DomainSpec, KernelSpec, MotionSpec

MAX_SOURCES = 4
RATE_FORMS = ("constant", "spatial", "hill_repress", "hill_activate", "saturating")


# ----------------------------------------------------------------------------
# species

@dataclass(frozen=True)
class SpeciesSpec:
    id: int
    name: str
    locality: str = "diffusive"
    anchor: Optional[tuple] = None
    abundance: str = "big"
    motion: MotionSpec = field(default_factory=MotionSpec)

    @property
    def is_localized(self) -> bool:
        return self.locality == "localized"

    @property
    def is_small(self) -> bool:
        return self.abundance == "small"


# ----------------------------------------------------------------------------
# rate factors

@dataclass(frozen=True)
class MassFunctionalSpec:
    """Smoothed indicator of ``targets x B(center, radius)``.

    The value is 1 up to ``radius - ramp`` and decreases linearly to 0 at
    ``radius``.  ``center`` is either ``"reaction"`` (the reaction location)
    or a fixed point.
    """

    targets: tuple
    radius: float
    ramp: Optional[float] = None
    center: Any = "reaction"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValidationError("mass functional radius must be positive", radius=self.radius)
        ramp = 0.1 * self.radius if self.ramp is None else float(self.ramp)
        if not 0 < ramp <= self.radius:
            raise ValidationError("mass functional ramp must lie in (0, radius]", ramp=ramp)
        object.__setattr__(self, "ramp", ramp)
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))
        if self.center != "reaction":
            object.__setattr__(self, "center", tuple(float(v) for v in np.atleast_1d(self.center)))

    def profile(self, dist) -> np.ndarray:
        """Ramp value as a function of distance to the center."""
        dist = np.asarray(dist, dtype=float)
        return np.clip((self.radius - dist) / self.ramp, 0.0, 1.0)

    def centers(self, ybar) -> np.ndarray:
        ybar = np.asarray(ybar, dtype=float)
        if self.center == "reaction":
            return ybar
        return np.broadcast_to(np.asarray(self.center), ybar.shape)


@dataclass(frozen=True)
class SpatialTable:
    """Nonnegative factor tabulated on a regular node grid spanning the domain."""

    lo: tuple
    hi: tuple
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != len(self.lo):
            raise ValidationError("spatial table rank must equal the domain dimension",
                                  rank=values.ndim, dim=len(self.lo))
        if np.any(np.array(values.shape) < 2):
            raise ValidationError("spatial table needs at least two nodes per axis")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValidationError("spatial table values must be finite and nonnegative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def sup(self) -> float:
        return float(self.values.max())

    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        shape = np.array(self.values.shape)
        u = (pts - lo) / (hi - lo) * (shape - 1)
        u = np.clip(u, 0.0, shape - 1)
        base = np.minimum(np.floor(u).astype(int), shape - 2)
        frac = u - base
        out = np.zeros(pts.shape[0])
        d = pts.shape[1]
        for corner in range(2**d):
            bits = [(corner >> a) & 1 for a in range(d)]
            w = np.ones(pts.shape[0])
            idx = []
            for a, b in enumerate(bits):
                w = w * (frac[:, a] if b else 1.0 - frac[:, a])
                idx.append(base[:, a] + b)
            out += w * self.values[tuple(idx)]
        return out

    def __eq__(self, other):
        return (isinstance(other, SpatialTable) and self.lo == other.lo and self.hi == other.hi
                and np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash((self.lo, self.hi, self.values.tobytes()))


@dataclass(frozen=True)
class RateFactorSpec:
    """``h(y, a) = table(y) * form(a)`` with a closed-form library ``form``.

    ``constant``: c.  ``hill_repress``: c1 / (1 + (c2 a)^k).
    ``hill_activate``: c1 a^k / (c2^k + a^k).  ``saturating``: c1 a / (c2 + a).
    ``spatial``: c times the table only.  The pre-limit model multiplies by
    ``N ** scale_exponent``.
    """

    kind: str = "constant"
    c: float = 1.0
    c1: float = 1.0
    c2: float = 1.0
    k: float = 1.0
    table: Optional[SpatialTable] = None
    mass: Optional[MassFunctionalSpec] = None
    scale_exponent: int = 0

    def __post_init__(self):
        if self.kind not in RATE_FORMS:
            raise ValidationError("unknown rate factor kind", kind=self.kind)
        for name in ("c", "c1", "c2", "k"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ValidationError(f"rate parameter {name} must be finite and >= 0", value=v)
        if self.kind in ("hill_repress", "hill_activate", "saturating"):
            if self.mass is None:
                raise ValidationError(f"rate kind {self.kind} needs a mass functional")
            if self.kind != "hill_repress" and not self.c2 > 0:
                raise ValidationError("c2 must be positive", kind=self.kind)
            if self.kind != "saturating" and self.k < 1:
                # below 1 the Hill form is not Lipschitz at a = 0
                raise ValidationError("Hill coefficient k must be >= 1", k=self.k)
        if self.kind == "spatial" and self.table is None:
            raise ValidationError("rate kind spatial needs a table")
        if self.kind in ("constant", "spatial") and self.mass is not None:
            raise ValidationError(f"rate kind {self.kind} does not use a mass functional")

    @property
    def mass_dependent(self) -> bool:
        return self.mass is not None

    def form(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        if self.kind == "constant":
            return np.full(a.shape, float(self.c))
        if self.kind == "spatial":
            return np.full(a.shape, float(self.c))
        if self.kind == "hill_repress":
            return self.c1 / (1.0 + (self.c2 * a) ** self.k)
        if self.kind == "hill_activate":
            ak = a**self.k
            return self.c1 * ak / (self.c2**self.k + ak)
        return self.c1 * a / (self.c2 + a)

    def spatial(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.table is None:
            return np.ones(pts.shape[0])
        return self.table(pts)

    def __call__(self, points, a) -> np.ndarray:
        """Unscaled ``h(y, a)``; ``a`` broadcasts against the points."""
        return self.spatial(points) * self.form(a)

    def sup_form(self, a_max: float) -> float:
        """Supremum of ``form`` over ``a in [0, a_max]`` (closed form)."""
        if self.kind in ("constant", "spatial"):
            return float(self.c)
        if self.kind == "hill_repress":
            return float(self.c1)
        return float(self.form(max(a_max, 0.0)))

    def sup(self, a_max: float = 0.0) -> float:
        tab = 1.0 if self.table is None else self.table.sup
        return tab * self.sup_form(a_max)

    def lipschitz_a(self) -> float:
        """Lipschitz constant of ``form`` in ``a`` (times the table max)."""
        tab = 1.0 if self.table is None else self.table.sup
        if self.kind in ("constant", "spatial"):
            return 0.0
        if self.kind == "saturating":
            return tab * self.c1 / self.c2
        # both Hill forms are c * g(s) with g(s) = s^k / (1 + s^k) (or its
        # complement); |g'| peaks where s^k = (k - 1) / (k + 1)
        k = float(self.k)
        u = (k - 1.0) / (k + 1.0)
        peak = k * u ** ((k - 1.0) / k) / (1.0 + u) ** 2
        scale = self.c2 if self.kind == "hill_repress" else 1.0 / self.c2
        return tab * self.c1 * scale * peak


# ----------------------------------------------------------------------------
# reactions

@dataclass(frozen=True)
class ReactionSpec:
    id: int
    name: str
    sources: tuple
    products: tuple
    rate: RateFactorSpec
    consume: tuple = ()
    localized_at: Optional[tuple] = None
    # derived by classify_reaction / the parser
    nu: tuple = ()
    nu_prime: tuple = ()
    k_b: int = 0
    k_prime_b: int = 0
    cls: str = "R_nl"
    consumed_slots: tuple = ()
    created: tuple = ()

    @property
    def k(self) -> int:
        return len(self.sources)

    @property
    def k_prime(self) -> int:
        return len(self.products)

    @property
    def is_localized(self) -> bool:
        return self.localized_at is not None

    @property
    def is_flow(self) -> bool:
        """True for reactions that leave every small-species count unchanged."""
        return self.cls == "R_nl"


def classify_reaction(reaction: ReactionSpec, species) -> ReactionSpec:
    """Derive stoichiometry, abundant-source counts and the R^l / R^nl class.

    Sources are reordered so that abundant species come first (stable), with
    their consume flags carried along.
    """
    n = len(species)
    consume = reaction.consume or tuple(True for _ in reaction.sources)
    if len(consume) != len(reaction.sources):
        raise ValidationError("consume flags must match the number of sources",
                              reaction=reaction.name)
    order = sorted(range(len(reaction.sources)), key=lambda i: species[reaction.sources[i]].is_small)
    sources = tuple(reaction.sources[i] for i in order)
    consume = tuple(bool(consume[i]) for i in order)
    products = tuple(sorted(reaction.products, key=lambda x: species[x].is_small))
    nu = tuple(sum(1 for s in sources if s == x) for x in range(n))
    nu_prime = tuple(sum(1 for s in products if s == x) for x in range(n))
    k_b = sum(1 for s in sources if not species[s].is_small)
    k_prime_b = sum(1 for s in products if not species[s].is_small)
    changes_small = sum(abs(nu[x] - nu_prime[x]) for x in range(n) if species[x].is_small)
    cls = "R_nl" if changes_small == 0 else "R_l"

    created = list(products)
    for s, keep in zip(sources, consume):
        if not keep:
            if s not in created:
                raise ValidationError("a source that is not consumed must also be listed as a product",
                                      reaction=reaction.name, species=species[s].name)
            created.remove(s)
    consumed_slots = tuple(i for i, keep in enumerate(consume) if keep)
    return replace(reaction, sources=sources, products=products, consume=consume, nu=nu,
                   nu_prime=nu_prime, k_b=k_b, k_prime_b=k_prime_b, cls=cls,
                   consumed_slots=consumed_slots, created=tuple(created))


# ----------------------------------------------------------------------------
# network

@dataclass(frozen=True)
class NetworkSpec:
    species: tuple
    reactions: tuple
    domain: DomainSpec
    kernel: KernelSpec
    N: int = 1

    @property
    def n_species(self) -> int:
        return len(self.species)

    def species_id(self, name: str) -> int:
        for s in self.species:
            if s.name == name:
                return s.id
        raise ValidationError("unknown species", species=name)

    def reaction_id(self, name: str) -> int:
        for r in self.reactions:
            if r.name == name:
                return r.id
        raise ValidationError("unknown reaction", reaction=name)

    @property
    def small_species(self) -> tuple:
        return tuple(s.id for s in self.species if s.is_small)

    @property
    def small_mask(self) -> np.ndarray:
        return np.array([s.is_small for s in self.species], dtype=bool)

    @property
    def localized_mask(self) -> np.ndarray:
        return np.array([s.is_localized for s in self.species], dtype=bool)

    def with_N(self, N: int) -> "NetworkSpec":
        if int(N) < 1:
            raise ValidationError("scale N must be a positive integer", N=N)
        return replace(self, N=int(N))

    def max_sigma2(self) -> float:
        return max([s.motion.sigma2 for s in self.species] + [0.0])

    def pre_limit_factor(self, r: ReactionSpec, N: Optional[int] = None) -> float:
        """``N ** scale_exponent``: multiplier turning ``h`` into ``h^N``."""
        N = self.N if N is None else N
        return float(N) ** r.rate.scale_exponent

    def limit_exponent(self, r: ReactionSpec) -> int:
        """Power of N in the normalised factor; zero means an N-free limit."""
        return r.k_b - (1 if r.is_flow else 0) + r.rate.scale_exponent

    def check_limit_regime(self) -> None:
        bad = [r.name for r in self.reactions if self.limit_exponent(r) != 0]
        if bad:
            raise ValidationError("reactions without an N-independent normalised rate factor",
                                  reactions=bad)


def scaled_rate_factor(network: NetworkSpec, r: ReactionSpec, N: int, ybar, a) -> np.ndarray:
    """Normalised factor ``N^(k_b - 1{r in R_nl}) * h^N(ybar, a)``."""
    hN = network.pre_limit_factor(r, N) * r.rate(ybar, a)
    return float(N) ** (r.k_b - (1 if r.is_flow else 0)) * hN


# ----------------------------------------------------------------------------
# configuration files

@dataclass
class ModelConfig:
    """Parsed configuration: the network plus the free-form auxiliary blocks."""

    network: NetworkSpec
    initial: dict
    solver: dict
    experiment: dict
    raw: dict
    source: str = "<string>"


class _Marks:
    """Maps key paths of a YAML document to (line, column)."""

    def __init__(self, text: str):
        self.marks = {}
        try:
            node = yaml.compose(text)
        except yaml.YAMLError:
            node = None
        if node is not None:
            self._walk(node, ())

    def _walk(self, node, path):
        self.marks[path] = (node.start_mark.line + 1, node.start_mark.column + 1)
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                self._walk(v, path + (k.value,))
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                self._walk(v, path + (i,))

    def where(self, path) -> str:
        path = tuple(path)
        while path and path not in self.marks:
            path = path[:-1]
        line, col = self.marks.get(path, (0, 0))
        return f"line {line}, column {col}"


class _Collector:
    def __init__(self, marks: _Marks, source: str):
        self.marks = marks
        self.source = source
        self.errors = []

    def add(self, path, message):
        loc = self.marks.where(path)
        dotted = ".".join(str(p) for p in path) or "<root>"
        self.errors.append(f"{self.source}: {loc}: {dotted}: {message}")

    def raise_if_any(self):
        if self.errors:
            raise ValidationError("invalid configuration:\n  " + "\n  ".join(self.errors),
                                  errors=list(self.errors))


def _vector(value, dim, what):
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.shape != (dim,):
        raise ValueError(f"{what} must have {dim} coordinate(s)")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} must be finite")
    return tuple(float(v) for v in arr)


def _build(doc: dict, errs: _Collector) -> Optional[NetworkSpec]:
    if not isinstance(doc, dict):
        errs.add((), "top level must be a mapping")
        return None
    for key in ("domain", "kernel", "species", "reactions"):
        if key not in doc:
            errs.add((), f"missing required block '{key}'")
    if errs.errors:
        return None

    try:
        dom = doc["domain"]
        domain = DomainSpec(tuple(dom["lo"]), tuple(dom["hi"]))
    except (KeyError, TypeError, ValueError, ValidationError) as exc:
        errs.add(("domain",), f"bad domain: {exc}")
        return None
    d = domain.dim

    try:
        ker = doc["kernel"]
        kernel = KernelSpec(float(ker["epsilon"]), ker.get("family", "epanechnikov"), d)
    except (KeyError, TypeError, ValueError, ValidationError) as exc:
        errs.add(("kernel",), f"bad kernel: {exc}")
        return None

    N = 1
    scaling = doc.get("scaling") or {}
    try:
        N = int(scaling.get("N", 1))
        if N < 1 or N != float(scaling.get("N", 1)):
            raise ValueError
    except (TypeError, ValueError):
        errs.add(("scaling", "N"), "N must be a positive integer")

    species = []
    names = {}
    raw_species = doc["species"]
    if not isinstance(raw_species, list) or not raw_species:
        errs.add(("species",), "species must be a non-empty list")
        return None
    for i, sp in enumerate(raw_species):
        path = ("species", i)
        if not isinstance(sp, dict) or "name" not in sp:
            errs.add(path, "species entry needs a name")
            continue
        name = str(sp["name"])
        if name in names:
            errs.add(path + ("name",), f"duplicate species name '{name}'")
            continue
        locality = sp.get("locality", "diffusive")
        abundance = sp.get("abundance", "big")
        if locality not in ("diffusive", "localized"):
            errs.add(path + ("locality",), "locality must be 'diffusive' or 'localized'")
            continue
        if abundance not in ("big", "small"):
            errs.add(path + ("abundance",), "abundance must be 'big' or 'small'")
            continue
        anchor = None
        try:
            if locality == "localized":
                if "anchor" not in sp:
                    raise ValueError("localized species need an anchor")
                anchor = _vector(sp["anchor"], d, "anchor")
                if not domain.contains(np.asarray(anchor)):
                    raise ValueError("anchor lies outside the domain")
                motion = MotionSpec(tuple([0.0] * d), 0.0)
                if sp.get("sigma2", 0.0) or any(np.atleast_1d(sp.get("drift", 0.0))):
                    raise ValueError("localized species cannot move")
            else:
                drift = _vector(sp.get("drift", [0.0] * d), d, "drift")
                motion = MotionSpec(drift, float(sp.get("sigma2", 0.0)))
                if not motion.sigma2 > 0:
                    raise ValueError("diffusive species need sigma2 > 0")
                if abundance == "small":
                    raise ValueError("small-abundance species must be localized")
        except (TypeError, ValueError, ValidationError) as exc:
            errs.add(path, str(exc))
            continue
        names[name] = len(species)
        species.append(SpeciesSpec(len(species), name, locality, anchor, abundance, motion))

    def sid(name, path):
        if name not in names:
            errs.add(path, f"unknown species '{name}'")
            return None
        return names[name]

    reactions = []
    rnames = set()
    raw_reactions = doc["reactions"] or []
    if not isinstance(raw_reactions, list):
        errs.add(("reactions",), "reactions must be a list")
        return None
    for i, rx in enumerate(raw_reactions):
        path = ("reactions", i)
        if not isinstance(rx, dict):
            errs.add(path, "reaction entry must be a mapping")
            continue
        name = str(rx.get("name", f"r{i + 1}"))
        if name in rnames:
            errs.add(path + ("name",), f"duplicate reaction name '{name}'")
            continue
        rnames.add(name)
        src = [sid(s, path + ("sources", j)) for j, s in enumerate(rx.get("sources") or [])]
        prod = [sid(s, path + ("products", j)) for j, s in enumerate(rx.get("products") or [])]
        if None in src or None in prod:
            continue
        if len(src) > MAX_SOURCES:
            errs.add(path + ("sources",), f"at most {MAX_SOURCES} sources are supported")
            continue
        consume = rx.get("consume", True)
        if isinstance(consume, bool):
            consume = [consume] * len(src)
        localized_at = None
        try:
            if rx.get("localized_at") is not None:
                localized_at = _vector(rx["localized_at"], d, "localized_at")
                if not domain.contains(np.asarray(localized_at)):
                    raise ValueError("reaction location lies outside the domain")
        except (TypeError, ValueError) as exc:
            errs.add(path + ("localized_at",), str(exc))
            continue
        try:
            rate = _parse_rate(rx.get("rate", {}), domain, names)
        except (TypeError, ValueError, KeyError, ValidationError) as exc:
            errs.add(path + ("rate",), f"bad rate factor: {exc}")
            continue
        base = ReactionSpec(len(reactions), name, tuple(src), tuple(prod), rate,
                            tuple(bool(c) for c in consume), localized_at)
        try:
            reactions.append(classify_reaction(base, species))
        except ValidationError as exc:
            errs.add(path, str(exc))

    if errs.errors:
        return None

    # localized species only appear at their anchor
    for r in reactions:
        for x in set(r.created):
            sp = species[x]
            if sp.is_localized and (r.localized_at is None
                                    or not np.allclose(r.localized_at, sp.anchor)):
                errs.add(("reactions", r.id),
                         f"localized species '{sp.name}' may only be produced by reactions "
                         f"localized at its anchor {sp.anchor}")
    if errs.errors:
        return None
    return NetworkSpec(tuple(species), tuple(reactions), domain, kernel, N)


def _parse_rate(spec: dict, domain: DomainSpec, names: dict) -> RateFactorSpec:
    if not isinstance(spec, dict):
        raise ValueError("rate must be a mapping")
    spec = dict(spec)
    kind = spec.pop("kind", "constant")
    table = None
    if "table" in spec:
        values = np.asarray(spec.pop("table"), dtype=float)
        table = SpatialTable(domain.lo, domain.hi, values)
    mass = None
    if "mass" in spec:
        m = dict(spec.pop("mass"))
        targets = []
        for t in m.get("targets", []):
            if t not in names:
                raise ValueError(f"unknown species '{t}' in mass functional")
            targets.append(names[t])
        center = m.get("center", "reaction")
        if center != "reaction":
            center = _vector(center, domain.dim, "mass functional center")
        mass = MassFunctionalSpec(tuple(targets), float(m["radius"]), m.get("ramp"), center)
    kwargs = {}
    for key in ("c", "c1", "c2", "k"):
        if key in spec:
            kwargs[key] = float(spec.pop(key))
    scale_exponent = int(spec.pop("scale_exponent", 0))
    if spec:
        raise ValueError(f"unknown rate keys: {sorted(spec)}")
    return RateFactorSpec(kind, table=table, mass=mass, scale_exponent=scale_exponent, **kwargs)


def load_config_text(text: str, source: str = "<string>") -> ModelConfig:
    """Parse a configuration document; errors carry line/column positions."""
    try:
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ValidationError(f"{source}: {where}: syntax error: {exc.problem}",
                              line=mark.line + 1 if mark else None,
                              column=mark.column + 1 if mark else None) from None
    except yaml.YAMLError as exc:
        raise ValidationError(f"{source}: syntax error: {exc}") from None
    errs = _Collector(_Marks(text), source)
    network = _build(doc, errs)
    errs.raise_if_any()
    return ModelConfig(network, dict(doc.get("initial") or {}), dict(doc.get("solver") or {}),
                       dict(doc.get("experiment") or {}), doc, source)


def load_config(path) -> ModelConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ValidationError(f"configuration file not found: {path}", path=str(path)) from None
    except OSError as exc:
        raise ValidationError(f"cannot read configuration file {path}: {exc}") from None
    return load_config_text(text, str(path))


def parse_network(config_text: str) -> NetworkSpec:
    return load_config_text(config_text).network


def network_to_dict(net: NetworkSpec) -> dict:
    names = [s.name for s in net.species]
    out = {
        "domain": {"lo": list(net.domain.lo), "hi": list(net.domain.hi)},
        "kernel": {"epsilon": net.kernel.epsilon, "family": net.kernel.family},
        "scaling": {"N": net.N},
        "species": [],
        "reactions": [],
    }
    for s in net.species:
        entry = {"name": s.name, "locality": s.locality, "abundance": s.abundance}
        if s.is_localized:
            entry["anchor"] = list(s.anchor)
        else:
            entry["sigma2"] = s.motion.sigma2
            if any(s.motion.drift):
                entry["drift"] = list(s.motion.drift)
        out["species"].append(entry)
    for r in net.reactions:
        rate = {"kind": r.rate.kind}
        if r.rate.kind in ("constant", "spatial"):
            rate["c"] = r.rate.c
        else:
            rate.update(c1=r.rate.c1, c2=r.rate.c2, k=r.rate.k)
        if r.rate.table is not None:
            rate["table"] = r.rate.table.values.tolist()
        if r.rate.mass is not None:
            m = r.rate.mass
            rate["mass"] = {"targets": [names[t] for t in m.targets], "radius": m.radius,
                            "ramp": m.ramp,
                            "center": m.center if m.center == "reaction" else list(m.center)}
        if r.rate.scale_exponent:
            rate["scale_exponent"] = r.rate.scale_exponent
        entry = {"name": r.name, "sources": [names[x] for x in r.sources],
                 "products": [names[x] for x in r.products], "rate": rate}
        if not all(r.consume):
            entry["consume"] = list(r.consume)
        if r.localized_at is not None:
            entry["localized_at"] = list(r.localized_at)
        out["reactions"].append(entry)
    return out


def serialize_network(net: NetworkSpec) -> str:
    return yaml.safe_dump(network_to_dict(net), sort_keys=False)
