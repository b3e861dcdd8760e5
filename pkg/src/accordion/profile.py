"""Look-up table from depth configuration to size, compute and measured error."""

from __future__ import annotations

import csv
import io
import time
from collections.abc import Iterable
from dataclasses import dataclass, field, replace

from .arch import AccordionModel, DepthConfig, Scheme, size_of
from .data import Dataset
from .errors import ConfigError, InfeasibleBudgetError, InputError, UnreachableAccuracyError
from .policy import link_budget_bits
from .train import evaluate

CSV_COLUMNS = ["scheme", "n", "size_bits", "mac_count", "layer_fraction", "error_rate"]


@dataclass(frozen=True)
class ProfileEntry:
    scheme: Scheme
    n: int
    size_bits: int
    mac_count: int
    layer_fraction: float
    error_rate: float

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme.parse(self.scheme))


@dataclass
class ProfileTable:
    model_id: str
    entries: list[ProfileEntry]
    dataset_id: str = ""
    evaluated_at: str = ""
    _by_scheme: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.entries = sorted(self.entries, key=lambda e: (e.scheme.value, e.n))
        by: dict[Scheme, list[ProfileEntry]] = {}
        for e in self.entries:
            by.setdefault(e.scheme, []).append(e)
        for scheme, rows in by.items():
            ns = [e.n for e in rows]
            if ns != list(range(1, len(rows) + 1)):
                raise ConfigError(f"{scheme.value}: table must hold exactly n = 1..N once each")
            for a, b in zip(rows, rows[1:]):
                if b.size_bits <= a.size_bits or b.mac_count <= a.mac_count:
                    raise ConfigError(f"{scheme.value}: size and MACs must grow with n")
        self._by_scheme = by

    @property
    def schemes(self) -> list[Scheme]:
        return list(self._by_scheme)

    def rows(self, scheme) -> list[ProfileEntry]:
        scheme = Scheme.parse(scheme)
        if scheme not in self._by_scheme:
            raise ConfigError(f"table has no entries for scheme {scheme.value}")
        return self._by_scheme[scheme]

    def entry(self, scheme, n: int) -> ProfileEntry:
        rows = self.rows(scheme)
        if not 1 <= n <= len(rows):
            raise ConfigError(f"no entry for n={n}")
        return rows[n - 1]

    def rescaled(self, bits_per_param: int, from_bits_per_param: int) -> ProfileTable:
        """Same table with sizes converted to another bits-per-parameter convention."""
        entries = [
            replace(e, size_bits=e.size_bits // from_bits_per_param * bits_per_param)
            for e in self.entries
        ]
        return ProfileTable(self.model_id, entries, self.dataset_id, self.evaluated_at)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for e in self.entries:
            w.writerow(
                [e.scheme.value, e.n, e.size_bits, e.mac_count, repr(e.layer_fraction),
                 repr(e.error_rate)]
            )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, model_id: str = "") -> ProfileTable:
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames != CSV_COLUMNS:
            raise ConfigError(f"profile CSV must have columns {CSV_COLUMNS}")
        entries = [
            ProfileEntry(
                Scheme.parse(r["scheme"]), int(r["n"]), int(r["size_bits"]),
                int(r["mac_count"]), float(r["layer_fraction"]), float(r["error_rate"]),
            )
            for r in reader
        ]
        return cls(model_id, entries)

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def load(cls, path, model_id: str = "") -> ProfileTable:
        with open(path, newline="") as fh:
            return cls.from_csv(fh.read(), model_id)


def build_table(
    model: AccordionModel,
    schemes: Iterable = (Scheme.COML, Scheme.BLOCKCOML),
    validation: Dataset | None = None,
    model_id: str = "",
    dataset_id: str = "",
) -> ProfileTable:
    if validation is None or len(validation) == 0:
        raise InputError("profiling needs a nonempty validation set")
    entries = []
    for scheme in schemes:
        scheme = Scheme.parse(scheme)
        for n in range(1, model.spec.total_units + 1):
            cfg = DepthConfig(scheme, n)
            rep = size_of(model, cfg)
            entries.append(
                ProfileEntry(scheme, n, rep.size_bits, rep.mac_count, rep.layer_fraction,
                             evaluate(model, cfg, validation))
            )
    stamp = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    return ProfileTable(model_id, entries, dataset_id, stamp)


def select_by_size(table: ProfileTable, scheme, max_bits: int) -> ProfileEntry:
    """Lowest-error entry no larger than ``max_bits``.

    Ties go to the larger n, then the smaller size.
    """
    if max_bits < 0:
        raise ConfigError("bit budget must be nonnegative")
    feasible = [e for e in table.rows(scheme) if e.size_bits <= max_bits]
    if not feasible:
        raise InfeasibleBudgetError(
            f"budget of {max_bits} bits is below the smallest configuration "
            f"({table.rows(scheme)[0].size_bits} bits)"
        )
    return min(feasible, key=lambda e: (e.error_rate, -e.n, e.size_bits))


def select_by_accuracy(table: ProfileTable, scheme, max_error: float) -> ProfileEntry:
    """Smallest entry whose error does not exceed ``max_error``."""
    if not 0.0 <= max_error <= 1.0:
        raise ConfigError("max_error must lie in [0, 1]")
    ok = [e for e in table.rows(scheme) if e.error_rate <= max_error]
    if not ok:
        best = min(e.error_rate for e in table.rows(scheme))
        raise UnreachableAccuracyError(
            f"no configuration reaches error {max_error}; best is {best}"
        )
    return min(ok, key=lambda e: (e.size_bits, e.n))


def select_by_link(table: ProfileTable, scheme, throughput_bps, deadline_s) -> ProfileEntry:
    if throughput_bps <= 0 or deadline_s <= 0:
        raise ConfigError("throughput and deadline must be positive")
    return select_by_size(table, scheme, link_budget_bits(throughput_bps, deadline_s))
