"""Tabular ingestion, mixed-type encoding and role assignment."""
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("continuous", "categorical", "binary")
_SEPARATORS = "_.:="


@dataclass
class RawDataset:
    """Columns keyed by name. Continuous columns are float arrays with NaN for
    missing; categorical and binary columns are object arrays with None."""
    columns: dict
    kinds: dict

    @property
    def names(self):
        return list(self.columns)

    @property
    def n(self):
        return len(next(iter(self.columns.values()))) if self.columns else 0


@dataclass(frozen=True)
class RoleConfig:
    attribute: str
    outcome: str
    confounders: tuple = ()
    z_proxies: tuple = ()
    x_proxies: tuple = ()
    exclude_attribute_from_confounders: bool = False

    def __post_init__(self):
        for name in ("confounders", "z_proxies", "x_proxies"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @classmethod
    def from_dict(cls, d):
        return cls(attribute=d["attribute"], outcome=d["outcome"],
                   confounders=d.get("confounders", ()), z_proxies=d.get("z_proxies", ()),
                   x_proxies=d.get("x_proxies", ()),
                   exclude_attribute_from_confounders=bool(
                       d.get("exclude_attribute_from_confounders", False)))

    @classmethod
    def from_file(cls, path):
        return cls.from_dict(read_config_file(path))

    def to_dict(self):
        return {"attribute": self.attribute, "outcome": self.outcome,
                "confounders": list(self.confounders), "z_proxies": list(self.z_proxies),
                "x_proxies": list(self.x_proxies),
                "exclude_attribute_from_confounders": self.exclude_attribute_from_confounders}


def read_config_file(path):
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


@dataclass
class DesignMatrices:
    W: np.ndarray
    D: np.ndarray
    Z: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    w_labels: list = field(default_factory=list)
    z_labels: list = field(default_factory=list)
    x_labels: list = field(default_factory=list)
    d_label: str = "D"
    y_label: str = "Y"
    encoding: dict = field(default_factory=dict)
    column_kinds: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.D.shape[0]

    def take(self, rows):
        rows = np.asarray(rows)
        return DesignMatrices(self.W[rows], self.D[rows], self.Z[rows], self.X[rows],
                              self.Y[rows], list(self.w_labels), list(self.z_labels),
                              list(self.x_labels), self.d_label, self.y_label,
                              dict(self.encoding), dict(self.column_kinds))

    def features(self):
        """All covariate columns with labels, for per-feature comparisons."""
        mats = [self.W, self.Z, self.X]
        labels = list(self.w_labels) + list(self.z_labels) + list(self.x_labels)
        return np.column_stack([m.reshape(self.n, -1) for m in mats]), labels


def _is_missing(cell):
    return cell.strip() == ""


def load_csv(path, kinds=None):
    """Parse a headed CSV; ``kinds`` maps column name to a declared kind.

    Columns absent from ``kinds`` are continuous when every cell parses as a
    number and categorical otherwise.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    kinds = dict(kinds or {})
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: missing header row") from None
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"row length mismatch at line {line}: "
                                 f"expected {len(header)} fields, got {len(row)}")
            rows.append((line, row))
    if len(set(header)) != len(header):
        raise ValueError(f"{path}: duplicate column names in header")
    unknown = sorted(set(kinds) - set(header))
    if unknown:
        raise ValueError(f"unknown column in kinds map: {', '.join(unknown)}")
    for name, kind in kinds.items():
        if kind not in KINDS:
            raise ValueError(f"column {name}: kind must be one of {KINDS}, got {kind!r}")
    if not rows:
        raise ValueError(f"{path}: no data rows")

    columns, resolved = {}, {}
    for j, name in enumerate(header):
        cells = [row[j] for _, row in rows]
        kind = kinds.get(name) or _infer_kind(cells)
        resolved[name] = kind
        if kind == "continuous":
            vals = np.empty(len(cells))
            for i, cell in enumerate(cells):
                if _is_missing(cell):
                    vals[i] = np.nan
                    continue
                try:
                    vals[i] = float(cell)
                except ValueError:
                    raise ValueError(f"unparseable numeric value {cell!r} in column "
                                     f"{name} at line {rows[i][0]}") from None
            columns[name] = vals
        else:
            columns[name] = np.array([None if _is_missing(c) else c.strip() for c in cells],
                                     dtype=object)
    return RawDataset(columns, resolved)


def _infer_kind(cells):
    for c in cells:
        if _is_missing(c):
            continue
        try:
            float(c)
        except ValueError:
            return "categorical"
    return "continuous"


def _level_key(level):
    try:
        return (0, float(level), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(level))


def _levels(col):
    return sorted({v for v in col if v is not None}, key=_level_key)


def _as_levels(col, kind):
    if kind == "continuous":
        return np.array([None if np.isnan(v) else repr(float(v)) for v in col], dtype=object)
    return col


def _encode_column(name, col, kind):
    """Returns (matrix, labels, kinds) for one source column of W, Z or X."""
    if kind == "continuous":
        v = np.asarray(col, dtype=float).copy()
        if np.all(np.isnan(v)):
            raise ValueError(f"column {name} has no observed values")
        v[np.isnan(v)] = np.nanmean(v)
        sd = v.std()
        if not sd > 0:
            raise ValueError(f"constant continuous column {name} (sd = 0) cannot be standardized")
        return ((v - v.mean()) / sd)[:, None], [name], ["continuous"]
    levels = _levels(col)
    if not levels:
        raise ValueError(f"column {name} has no observed values")
    if kind == "binary":
        if len(levels) > 2:
            raise ValueError(f"binary column {name} has {len(levels)} levels")
        top = levels[-1]
        v = np.array([0.5 if c == top else -0.5 for c in col])
        return v[:, None], [name], ["binary"]
    mat = np.column_stack([np.where(col == lev, 0.5, -0.5) for lev in levels])
    return mat, [f"{name}={lev}" for lev in levels], ["binary"] * len(levels)


def _derived_from(name, source):
    return name == source or any(name.startswith(source + s) for s in _SEPARATORS)


def _encode_block(raw, names, encoding, column_kinds):
    mats, labels = [], []
    for name in names:
        m, labs, ks = _encode_column(name, raw.columns[name], raw.kinds[name])
        mats.append(m)
        labels += labs
        encoding[name] = labs
        column_kinds.update(zip(labs, ks))
    mat = np.column_stack(mats) if mats else np.zeros((raw.n, 0))
    return mat, labels


def _encode_scalar(raw, name, role):
    kind = raw.kinds[name]
    col = raw.columns[name]
    if kind == "continuous":
        v = np.asarray(col, dtype=float).copy()
        levels = np.unique(v[~np.isnan(v)])
    else:
        levels = _levels(col)
        v = None
    if role == "attribute":
        if len(levels) != 2:
            raise ValueError(f"attribute {name} must have exactly 2 observed levels, "
                             f"found {len(levels)}")
        top = levels[-1]
        if kind == "continuous":
            if np.any(np.isnan(v)):
                raise ValueError(f"attribute {name} has missing values")
            return (v == top).astype(float), top
        if any(c is None for c in col):
            raise ValueError(f"attribute {name} has missing values")
        return np.array([1.0 if c == top else 0.0 for c in col]), top
    # outcome keeps its natural scale so the effect is in outcome units
    if kind == "continuous":
        if np.all(np.isnan(v)):
            raise ValueError(f"outcome {name} has no observed values")
        v[np.isnan(v)] = np.nanmean(v)
        return v, None
    if len(levels) != 2:
        raise ValueError(f"non-numeric outcome {name} must be binary")
    top = levels[-1]
    out = np.array([np.nan if c is None else (1.0 if c == top else 0.0) for c in col])
    out[np.isnan(out)] = np.nanmean(out)
    return out, top


def encode(raw, roles):
    """Encode a raw table into design matrices according to ``roles``.

    Multi-level categoricals become one column per level (sorted), coded
    +0.5 present / -0.5 absent; missing is absent everywhere. Continuous
    covariates are mean-imputed and standardized. D is coded 0/1 with the
    larger level as 1; Y keeps its scale (binary outcomes become 0/1).
    """
    needed = [roles.attribute, roles.outcome, *roles.confounders,
              *roles.z_proxies, *roles.x_proxies]
    missing = [c for c in needed if c not in raw.columns]
    if missing:
        raise ValueError(f"columns not found in data: {', '.join(missing)}")
    if not roles.z_proxies:
        raise ValueError("treatment proxies required (z_proxies is empty)")
    if not roles.x_proxies:
        raise ValueError("outcome proxies required (x_proxies is empty)")
    confounders = list(roles.confounders)
    if roles.exclude_attribute_from_confounders:
        confounders = [c for c in confounders if not _derived_from(c, roles.attribute)]
    groups = {"attribute": [roles.attribute], "outcome": [roles.outcome],
              "confounders": confounders, "z_proxies": list(roles.z_proxies),
              "x_proxies": list(roles.x_proxies)}
    seen = {}
    for role, cols in groups.items():
        for c in cols:
            if c in seen and seen[c] != role:
                raise ValueError(f"column {c} assigned to both {seen[c]} and {role}")
            if c in seen:
                raise ValueError(f"column {c} listed twice in {role}")
            seen[c] = role

    encoding, column_kinds = {}, {}
    W, w_labels = _encode_block(raw, confounders, encoding, column_kinds)
    Z, z_labels = _encode_block(raw, roles.z_proxies, encoding, column_kinds)
    X, x_labels = _encode_block(raw, roles.x_proxies, encoding, column_kinds)
    D, _ = _encode_scalar(raw, roles.attribute, "attribute")
    Y, _ = _encode_scalar(raw, roles.outcome, "outcome")
    encoding[roles.attribute] = [roles.attribute]
    encoding[roles.outcome] = [roles.outcome]
    return DesignMatrices(W, D, Z, X, Y, w_labels, z_labels, x_labels,
                          roles.attribute, roles.outcome, encoding, column_kinds)


def split_indices(n, fraction, seed):
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    if n < 2:
        raise ValueError(f"cannot split a dataset with n = {n} rows")
    k = int(np.floor(fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:k]), np.sort(perm[k:])


def split(data, fraction, seed):
    first, second = split_indices(data.n, fraction, seed)
    return data.take(first), data.take(second)


def design_to_raw(data):
    """Flatten design matrices back to a table the loader and encoder accept."""
    columns, kinds = {}, {}
    blocks = [(data.W, data.w_labels), (data.Z, data.z_labels), (data.X, data.x_labels)]
    for mat, labels in blocks:
        for j, lab in enumerate(labels):
            kind = data.column_kinds.get(lab, "continuous")
            columns[lab] = mat[:, j].astype(float)
            kinds[lab] = kind
    columns[data.d_label] = data.D.astype(float)
    kinds[data.d_label] = "binary"
    columns[data.y_label] = data.Y.astype(float)
    kinds[data.y_label] = "continuous"
    return RawDataset(columns, kinds)


def design_roles(data):
    return RoleConfig(data.d_label, data.y_label, tuple(data.w_labels),
                      tuple(data.z_labels), tuple(data.x_labels))


def _fmt(v):
    return format(float(v), ".17g")


def write_csv(data, path):
    """Write design matrices as CSV; returns the kinds map for reloading."""
    raw = design_to_raw(data)
    names = raw.names
    cols = [raw.columns[c] for c in names]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for i in range(raw.n):
            w.writerow([_fmt(c[i]) for c in cols])
    return dict(raw.kinds)


def read_design(path, roles, kinds=None):
    return encode(load_csv(path, kinds), roles)
