"""Domain types, normal densities and reduction of raw data to per-gene summaries."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = float(np.log(2 * np.pi))


class DataValidationError(ValueError):
    """Raised when input data violate a structural requirement."""


class ModelKind(str, enum.Enum):
    """Fixed/random treatment of the gene-specific mean effect and error variance.

    The first letter is the mean effect (Fixed or Random), the second the error
    variance (Fixed heterogeneous, Homogeneous or Random). ``RG`` is the
    generalized-LIMMA variant whose effect variance scales with the error
    variance.
    """

    RR = "RR"
    RG = "RG"
    RF = "RF"
    RH = "RH"
    FR = "FR"
    FF = "FF"
    FH = "FH"

    @property
    def random_mean(self) -> bool:
        return self.value[0] == "R"

    @property
    def variance_law(self) -> str:
        """``"random"``, ``"fixed"`` or ``"homogeneous"`` error variances."""
        if self in (ModelKind.RR, ModelKind.RG, ModelKind.FR):
            return "random"
        if self in (ModelKind.RF, ModelKind.FF):
            return "fixed"
        return "homogeneous"

    @classmethod
    def parse(cls, value: "str | ModelKind") -> "ModelKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown model kind {value!r}") from None


@dataclass(frozen=True)
class ExpressionMatrix:
    """Responses on the log scale, genes in rows and samples in columns.

    ``group_of_sample`` holds one label per column. Group order is the order
    of first appearance unless ``groups`` is given explicitly.
    """

    values: np.ndarray
    group_of_sample: tuple
    gene_ids: tuple
    groups: tuple = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise DataValidationError("values must be a 2-D gene x sample matrix")
        labels = tuple(self.group_of_sample)
        if len(labels) != values.shape[1]:
            raise DataValidationError(
                f"{len(labels)} group labels for {values.shape[1]} samples")
        gene_ids = tuple(str(g) for g in self.gene_ids) if len(self.gene_ids) else tuple(
            f"g{i + 1}" for i in range(values.shape[0]))
        if len(gene_ids) != values.shape[0]:
            raise DataValidationError(f"{len(gene_ids)} gene ids for {values.shape[0]} genes")
        groups = tuple(self.groups) if self.groups else tuple(dict.fromkeys(labels))
        missing = [grp for grp in groups if grp not in labels]
        if missing:
            raise DataValidationError(f"groups without samples: {missing}")
        stray = sorted({str(lab) for lab in labels if lab not in groups})
        if stray:
            raise DataValidationError(f"samples labelled with undeclared groups: {stray}")
        bad = ~np.isfinite(values)
        if bad.any():
            g, j = np.argwhere(bad)[0]
            raise DataValidationError(
                f"non-finite value for gene {gene_ids[g]!r}, sample {j} "
                f"({int(bad.sum())} in total)")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "group_of_sample", labels)
        object.__setattr__(self, "gene_ids", gene_ids)
        object.__setattr__(self, "groups", groups)

    @property
    def n_genes(self) -> int:
        return self.values.shape[0]

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def group_columns(self, group) -> np.ndarray:
        return np.array([lab == group for lab in self.group_of_sample])

    def group_sizes(self) -> np.ndarray:
        return np.array([int(self.group_columns(g).sum()) for g in self.groups])


@dataclass(frozen=True)
class GeneSummaries:
    """Per-gene sufficient statistics.

    For two-group data ``d`` is the difference and ``s`` the sum of the group
    means, ``m`` the pooled mean squared error on ``f`` degrees of freedom.
    For paired data ``n2`` is zero and the variance multiplier of ``d`` is
    ``1/n1`` instead of ``1/n1 + 1/n2``.
    """

    d: np.ndarray
    m: np.ndarray
    f: np.ndarray
    n1: np.ndarray
    n2: np.ndarray
    s: np.ndarray | None = None
    gene_ids: tuple = ()
    paired: bool = False
    scale: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        d = np.array(self.d, dtype=float).ravel()
        G = d.size
        m = np.broadcast_to(np.asarray(self.m, dtype=float), (G,)).copy()
        f = np.broadcast_to(np.asarray(self.f, dtype=float), (G,)).copy()
        n1 = np.broadcast_to(np.asarray(self.n1, dtype=float), (G,)).copy()
        n2 = np.broadcast_to(np.asarray(self.n2, dtype=float), (G,)).copy()
        s = np.full(G, np.nan) if self.s is None else np.array(self.s, dtype=float).ravel()
        if s.size != G:
            raise DataValidationError("inconsistent lengths across summary fields")
        if not (np.all(np.isfinite(d)) and np.all(np.isfinite(m))):
            raise DataValidationError("summaries must be finite")
        if np.any(m < 0):
            raise DataValidationError("mean squared errors must be nonnegative")
        if np.any(f < 1):
            raise DataValidationError("every gene needs at least one degree of freedom")
        if np.any(n1 < 1) or (not self.paired and np.any(n2 < 1)):
            raise DataValidationError("group sizes must be positive")
        scale = 1.0 / n1 if self.paired else 1.0 / n1 + 1.0 / n2
        gene_ids = tuple(self.gene_ids) if len(self.gene_ids) else tuple(
            f"g{i + 1}" for i in range(G))
        if len(gene_ids) != G:
            raise DataValidationError("inconsistent lengths across summary fields")
        for arr in (d, m, f, n1, n2, s, scale):
            arr.setflags(write=False)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "n1", n1)
        object.__setattr__(self, "n2", n2)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "gene_ids", gene_ids)
        object.__setattr__(self, "scale", scale)

    def __len__(self) -> int:
        return self.d.size

    def take(self, index) -> "GeneSummaries":
        """Subset or reorder genes."""
        index = np.asarray(index)
        ids = np.array(self.gene_ids, dtype=object)[index]
        return GeneSummaries(d=self.d[index], m=self.m[index], f=self.f[index],
                             n1=self.n1[index], n2=self.n2[index], s=self.s[index],
                             gene_ids=tuple(ids), paired=self.paired)


def _reject_short_genes(f: np.ndarray, gene_ids: tuple, minimum: int) -> None:
    bad = np.flatnonzero(f < minimum)
    if bad.size:
        listing = ", ".join(gene_ids[i] for i in bad[:20])
        more = f" and {bad.size - 20} more" if bad.size > 20 else ""
        raise DataValidationError(
            f"{bad.size} gene(s) without residual degrees of freedom: {listing}{more}")


def summarize(data: ExpressionMatrix) -> GeneSummaries:
    """Reduce two-group data to ``(d, s, m, f)`` per gene."""
    if data.n_groups != 2:
        raise DataValidationError(f"summarize needs exactly 2 groups, got {data.n_groups}")
    y1 = data.values[:, data.group_columns(data.groups[0])]
    y2 = data.values[:, data.group_columns(data.groups[1])]
    n1, n2 = y1.shape[1], y2.shape[1]
    f = np.full(data.n_genes, n1 + n2 - 2, dtype=float)
    _reject_short_genes(f, data.gene_ids, 1)
    mean1 = y1.mean(axis=1)
    mean2 = y2.mean(axis=1)
    sse = ((y1 - mean1[:, None]) ** 2).sum(axis=1) + ((y2 - mean2[:, None]) ** 2).sum(axis=1)
    return GeneSummaries(d=mean1 - mean2, s=mean1 + mean2, m=sse / f, f=f,
                         n1=np.full(data.n_genes, n1), n2=np.full(data.n_genes, n2),
                         gene_ids=data.gene_ids)


def paired_summarize(data: ExpressionMatrix) -> GeneSummaries:
    """Summaries for a single group of within-pair differences."""
    if data.n_groups != 1:
        raise DataValidationError(
            f"paired analysis needs one group of differences, got {data.n_groups}")
    n = data.values.shape[1]
    f = np.full(data.n_genes, n - 1, dtype=float)
    _reject_short_genes(f, data.gene_ids, 1)
    d = data.values.mean(axis=1)
    m = ((data.values - d[:, None]) ** 2).sum(axis=1) / f
    return GeneSummaries(d=d, m=m, f=f, n1=np.full(data.n_genes, n),
                         n2=np.zeros(data.n_genes), gene_ids=data.gene_ids, paired=True)


def _check_var(var) -> np.ndarray:
    var = np.asarray(var, dtype=float)
    if np.any(~(var > 0)):
        raise ValueError("variance must be positive")
    return var


def normal_logpdf(x, mean, var):
    var = _check_var(var)
    return -0.5 * (LOG_2PI + np.log(var) + (np.asarray(x) - mean) ** 2 / var)


def null_density(d, tau, var):
    """Density of ``d`` under the null component, N(tau, var)."""
    return np.exp(normal_logpdf(d, tau, var))


def nonnull_density(d, tau, psi, var_total):
    """Density of ``d`` under the non-null component, N(tau + psi, var_total)."""
    return np.exp(normal_logpdf(d, tau + psi, var_total))
