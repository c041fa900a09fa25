"""Schema handling, microdata ingestion, household restructuring and one-hot codec.

Data model
----------
A population dataset couples a household table with a person table, joined on
``household_id``. Every variable is categorical. ``restructure`` folds the
persons of each household into that household's row: one row per household,
with ``n_window`` person slots. Slots beyond the household's size are padding,
expressed through the reserved ``NA`` category that every person variable
carries as its last category. Household variables never carry ``NA``.

Within a row, occupied slots come first and are ordered by the schema's sort
keys (descending category index per key), so that equivalent households map to
identical rows.

File formats
------------
Schema: JSON object with keys ``household`` and ``person`` (lists of
``{"name": ..., "categories": [...]}``), optional ``n_window`` (defaults to
the observed maximum household size), optional ``person_sort_key`` (name or
list of names, default: first person variable then the rest in schema order)
and optional ``slot_anchor`` (default: first person variable). ``NA`` is
appended to person variables automatically when absent.

Microdata: two CSV files with header rows. The household file needs
``household_id`` plus one column per household variable; the person file needs
``household_id`` plus one column per person variable. Extra columns are
ignored.

Marginal targets: CSV with header ``variable,category,count_or_proportion``,
one row per category, plus a ``__n_households__`` row carrying the tract's
household count (and optionally ``__n_persons__``). Person variables are
listed without their ``NA`` category. Counts are normalised to proportions
per variable.
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, replace

import numpy as np

NA = "NA"

PROB_SUM_TOL = 1e-6

N_HOUSEHOLDS_KEY = "__n_households__"
N_PERSONS_KEY = "__n_persons__"


class SchemaError(ValueError):
    """Raised when a schema file or schema object is structurally invalid."""


class DataError(ValueError):
    """Raised when data does not conform to its schema."""


@dataclass(frozen=True)
class Variable:
    name: str
    categories: tuple[str, ...]
    has_na: bool = False

    @property
    def width(self) -> int:
        return len(self.categories)

    @property
    def na_index(self) -> int:
        if not self.has_na:
            raise SchemaError(f"variable {self.name!r} has no NA category")
        return len(self.categories) - 1

    def index(self, value: str) -> int:
        try:
            return self.categories.index(value)
        except ValueError:
            raise DataError(
                f"unknown category {value!r} for variable {self.name!r}"
            ) from None


@dataclass(frozen=True)
class Schema:
    household_vars: tuple[Variable, ...]
    person_vars: tuple[Variable, ...]
    n_window: int | None = None
    sort_keys: tuple[str, ...] = ()
    slot_anchor: str = ""

    def __post_init__(self):
        if not self.household_vars:
            raise SchemaError("schema needs at least one household variable")
        if not self.person_vars:
            raise SchemaError("schema needs at least one person variable")
        names = [v.name for v in self.household_vars + self.person_vars]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise SchemaError(f"duplicate variable name(s): {sorted(dupes)}")
        for var in self.household_vars + self.person_vars:
            if not var.categories:
                raise SchemaError(f"variable {var.name!r} has no categories")
            cats = list(var.categories)
            for c in cats:
                if cats.count(c) > 1:
                    raise SchemaError(
                        f"duplicate category {c!r} in variable {var.name!r}"
                    )
        for var in self.household_vars:
            if NA in var.categories:
                raise SchemaError(
                    f"household variable {var.name!r} must not carry an NA category"
                )
        for var in self.person_vars:
            if not var.has_na or var.categories[-1] != NA:
                raise SchemaError(
                    f"person variable {var.name!r} must carry NA as its last category"
                )
        if self.n_window is not None and self.n_window < 1:
            raise SchemaError("n_window must be >= 1")
        person_names = {v.name for v in self.person_vars}
        if not self.sort_keys:
            object.__setattr__(
                self, "sort_keys", tuple(v.name for v in self.person_vars)
            )
        for key in self.sort_keys:
            if key not in person_names:
                raise SchemaError(f"sort key {key!r} is not a person variable")
        if not self.slot_anchor:
            object.__setattr__(self, "slot_anchor", self.person_vars[0].name)
        if self.slot_anchor not in person_names:
            raise SchemaError(
                f"slot anchor {self.slot_anchor!r} is not a person variable"
            )

    # -- lookups ----------------------------------------------------------

    def household_var(self, name: str) -> Variable:
        for v in self.household_vars:
            if v.name == name:
                return v
        raise SchemaError(f"no household variable named {name!r}")

    def person_var(self, name: str) -> Variable:
        for v in self.person_vars:
            if v.name == name:
                return v
        raise SchemaError(f"no person variable named {name!r}")

    @property
    def household_names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.household_vars)

    @property
    def person_names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.person_vars)

    def with_n_window(self, n_window: int) -> Schema:
        return replace(self, n_window=n_window)

    def fingerprint(self) -> str:
        """Stable hex digest of the full schema definition."""
        payload = {
            "household": [[v.name, list(v.categories)] for v in self.household_vars],
            "person": [[v.name, list(v.categories)] for v in self.person_vars],
            "n_window": self.n_window,
            "sort_keys": list(self.sort_keys),
            "slot_anchor": self.slot_anchor,
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ColumnGroup:
    """One variable's block of one-hot columns; slot is None for household vars."""

    var: str
    slot: int | None
    start: int
    width: int

    @property
    def stop(self) -> int:
        return self.start + self.width


def column_layout(schema: Schema) -> tuple[tuple[ColumnGroup, ...], int]:
    """Column groups in row order: household variables, then slot 0..n-1."""
    if schema.n_window is None:
        raise SchemaError("cannot lay out columns while n_window is unresolved")
    groups = []
    start = 0
    for var in schema.household_vars:
        groups.append(ColumnGroup(var.name, None, start, var.width))
        start += var.width
    for slot in range(schema.n_window):
        for var in schema.person_vars:
            groups.append(ColumnGroup(var.name, slot, start, var.width))
            start += var.width
    return tuple(groups), start


@dataclass
class HouseholdRecord:
    household_id: str
    values: tuple[str, ...]
    persons: list[tuple[str, ...]]


@dataclass
class RestructuredTable:
    """One row per household: household values plus n_window person slots.

    A slot is either a tuple of person-variable values or None (padding).
    Occupied slots precede padding and are sorted by the schema's sort keys.
    """

    schema: Schema
    household_ids: list[str]
    households: list[tuple[str, ...]]
    slots: list[tuple[tuple[str, ...] | None, ...]]

    @property
    def n_rows(self) -> int:
        return len(self.household_ids)

    def to_records(self) -> list[HouseholdRecord]:
        """Flatten back to (household, persons) records; inverse of restructure."""
        out = []
        for hid, values, row_slots in zip(
            self.household_ids, self.households, self.slots
        ):
            persons = [slot for slot in row_slots if slot is not None]
            out.append(HouseholdRecord(hid, values, persons))
        return out


@dataclass
class EncodedMatrix:
    values: np.ndarray
    groups: tuple[ColumnGroup, ...]
    schema_fingerprint: str

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]


@dataclass
class DecodeStats:
    forced_na_cells: int = 0
    all_na_rows: int = 0


@dataclass
class TargetMarginals:
    """Per-variable category proportions; person variables exclude NA."""

    household_targets: dict[str, np.ndarray]
    person_targets: dict[str, np.ndarray]
    n_households: int
    n_persons: int | None = None


# ---------------------------------------------------------------------------
# loaders


def load_schema(path) -> Schema:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"could not parse schema file {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise SchemaError("schema file must contain a JSON object")

    def build(section, is_person):
        entries = raw.get(section)
        if not isinstance(entries, list):
            raise SchemaError(f"schema section {section!r} must be a list")
        out = []
        for entry in entries:
            if not isinstance(entry, dict) or "name" not in entry:
                raise SchemaError(f"malformed entry in section {section!r}: {entry!r}")
            name = str(entry["name"])
            cats = [str(c) for c in entry.get("categories", [])]
            if is_person:
                if NA in cats and cats[-1] != NA:
                    raise SchemaError(
                        f"person variable {name!r} lists NA in a non-final position"
                    )
                if NA not in cats:
                    cats.append(NA)
                out.append(Variable(name, tuple(cats), has_na=True))
            else:
                out.append(Variable(name, tuple(cats)))
        return tuple(out)

    sort_key = raw.get("person_sort_key") or []
    if isinstance(sort_key, str):
        sort_key = [sort_key]
    n_window = raw.get("n_window")
    if n_window is not None:
        n_window = int(n_window)
    return Schema(
        household_vars=build("household", is_person=False),
        person_vars=build("person", is_person=True),
        n_window=n_window,
        sort_keys=tuple(str(k) for k in sort_key),
        slot_anchor=str(raw.get("slot_anchor") or ""),
    )


def write_schema(schema: Schema, path) -> None:
    payload = {
        "n_window": schema.n_window,
        "person_sort_key": list(schema.sort_keys),
        "slot_anchor": schema.slot_anchor,
        "household": [
            {"name": v.name, "categories": list(v.categories)}
            for v in schema.household_vars
        ],
        "person": [
            {"name": v.name, "categories": list(v.categories)}
            for v in schema.person_vars
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _read_rows(path, required: list[str]) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        return list(reader)


def load_microdata(household_path, person_path, schema: Schema) -> list[HouseholdRecord]:
    """Read and join the two microdata tables; validates categories and ids."""
    hh_rows = _read_rows(household_path, ["household_id", *schema.household_names])
    p_rows = _read_rows(person_path, ["household_id", *schema.person_names])

    records: dict[str, HouseholdRecord] = {}
    order: list[str] = []
    for row in hh_rows:
        hid = row["household_id"]
        if hid in records:
            raise DataError(f"duplicate household_id {hid!r} in {household_path}")
        values = tuple(row[v.name] for v in schema.household_vars)
        for var, value in zip(schema.household_vars, values):
            var.index(value)
        records[hid] = HouseholdRecord(hid, values, [])
        order.append(hid)

    for row in p_rows:
        hid = row["household_id"]
        if hid not in records:
            raise DataError(
                f"person row references unknown household_id {hid!r} in {person_path}"
            )
        values = tuple(row[v.name] for v in schema.person_vars)
        for var, value in zip(schema.person_vars, values):
            var.index(value)
        records[hid].persons.append(values)

    if not p_rows:
        warnings.warn(
            f"person table {person_path} is empty; every household has zero persons",
            stacklevel=2,
        )
    return [records[hid] for hid in order]


# ---------------------------------------------------------------------------
# restructuring


def _sort_persons(persons, schema: Schema):
    key_vars = [schema.person_var(k) for k in schema.sort_keys]
    idx = {v.name: i for i, v in enumerate(schema.person_vars)}

    def key(values):
        return tuple(-var.index(values[idx[var.name]]) for var in key_vars)

    return sorted(persons, key=key)


def restructure(records: list[HouseholdRecord], schema: Schema) -> RestructuredTable:
    """Fold person records into one fixed-width row per household.

    Resolves n_window to the observed maximum household size when the schema
    leaves it open; a pinned n_window smaller than some household is an error.
    """
    anchor = schema.person_var(schema.slot_anchor)
    anchor_pos = list(schema.person_names).index(schema.slot_anchor)
    max_size = max((len(r.persons) for r in records), default=0)
    if schema.n_window is None:
        resolved = schema.with_n_window(max(max_size, 1))
    else:
        if max_size > schema.n_window:
            offender = next(r for r in records if len(r.persons) > schema.n_window)
            raise DataError(
                f"household {offender.household_id!r} has {len(offender.persons)} "
                f"persons but n_window is {schema.n_window}"
            )
        resolved = schema

    ids, households, slots = [], [], []
    for rec in records:
        for person in rec.persons:
            if person[anchor_pos] == NA:
                raise DataError(
                    f"household {rec.household_id!r} has a person with NA "
                    f"{anchor.name!r}; the anchor variable marks slot occupancy"
                )
        ordered = _sort_persons(rec.persons, resolved)
        row = tuple(ordered) + (None,) * (resolved.n_window - len(ordered))
        ids.append(rec.household_id)
        households.append(tuple(rec.values))
        slots.append(row)
    return RestructuredTable(resolved, ids, households, slots)


# ---------------------------------------------------------------------------
# one-hot codec


def encode_onehot(table: RestructuredTable) -> EncodedMatrix:
    """One row per household; one-hot per variable per slot, padding hits NA."""
    schema = table.schema
    groups, d = column_layout(schema)
    x = np.zeros((table.n_rows, d), dtype=np.float64)
    hh_vars = schema.household_vars
    p_vars = schema.person_vars
    n_hh = len(hh_vars)
    for i, (values, row_slots) in enumerate(zip(table.households, table.slots)):
        for g, var, value in zip(groups[:n_hh], hh_vars, values):
            x[i, g.start + var.index(value)] = 1.0
        gi = n_hh
        for slot in row_slots:
            for var in p_vars:
                g = groups[gi]
                if slot is None:
                    x[i, g.start + var.na_index] = 1.0
                else:
                    value = slot[list(schema.person_names).index(var.name)]
                    x[i, g.start + var.index(value)] = 1.0
                gi += 1
    return EncodedMatrix(x, groups, schema.fingerprint())


def _draw_categories(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = np.maximum(cdf[:, -1], 1.0)
    r = rng.random(probs.shape[0])
    return np.minimum(
        (cdf < r[:, None]).sum(axis=1), probs.shape[1] - 1
    )


def decode_onehot_with_stats(
    matrix: EncodedMatrix,
    schema: Schema,
    mode: str = "argmax",
    seed: int | None = None,
) -> tuple[RestructuredTable, DecodeStats]:
    """Map probability rows back to categories.

    argmax ties break toward the lowest category index; "sample" draws one
    category per group from its probabilities (seed required). A slot is
    occupied iff its anchor-variable group decodes to something other than NA;
    every other variable in an unoccupied slot is forced to NA and each decode
    that disagreed with the forced value is counted.
    """
    if matrix.schema_fingerprint != schema.fingerprint():
        raise DataError("encoded matrix does not match the supplied schema")
    if mode not in ("argmax", "sample"):
        raise ValueError(f"unknown decode mode {mode!r}")
    if mode == "sample" and seed is None:
        raise ValueError("sample mode needs a seed")
    x = np.asarray(matrix.values, dtype=np.float64)
    n = x.shape[0]
    rng = np.random.default_rng(seed) if mode == "sample" else None

    choices = {}
    for g in matrix.groups:
        block = x[:, g.start : g.stop]
        sums = block.sum(axis=1)
        bad = np.where(np.abs(sums - 1.0) > PROB_SUM_TOL)[0]
        if bad.size:
            raise DataError(
                f"group {g.var!r} (slot {g.slot}) row {bad[0]} sums to "
                f"{sums[bad[0]]:.8f}, not 1"
            )
        if mode == "argmax":
            choices[g] = np.argmax(block, axis=1)
        else:
            choices[g] = _draw_categories(block, rng)

    n_hh = len(schema.household_vars)
    hh_groups = matrix.groups[:n_hh]
    person_names = schema.person_names
    anchor_name = schema.slot_anchor
    stats = DecodeStats()

    ids, households, slots = [], [], []
    slot_groups: dict[int, dict[str, ColumnGroup]] = {}
    for g in matrix.groups[n_hh:]:
        slot_groups.setdefault(g.slot, {})[g.var] = g

    for i in range(n):
        values = tuple(
            schema.household_vars[k].categories[choices[g][i]]
            for k, g in enumerate(hh_groups)
        )
        row_slots = []
        for s in range(schema.n_window):
            by_var = slot_groups[s]
            anchor_var = schema.person_var(anchor_name)
            anchor_idx = choices[by_var[anchor_name]][i]
            if anchor_idx == anchor_var.na_index:
                for name in person_names:
                    if name == anchor_name:
                        continue
                    var = schema.person_var(name)
                    if choices[by_var[name]][i] != var.na_index:
                        stats.forced_na_cells += 1
                continue
            person = tuple(
                schema.person_var(name).categories[choices[by_var[name]][i]]
                for name in person_names
            )
            row_slots.append(person)
        if not row_slots:
            stats.all_na_rows += 1
        ordered = _sort_persons(row_slots, schema)
        ids.append(str(i))
        households.append(values)
        slots.append(tuple(ordered) + (None,) * (schema.n_window - len(ordered)))
    return RestructuredTable(schema, ids, households, slots), stats


def decode_onehot(
    matrix: EncodedMatrix,
    schema: Schema,
    mode: str = "argmax",
    seed: int | None = None,
) -> RestructuredTable:
    table, _ = decode_onehot_with_stats(matrix, schema, mode=mode, seed=seed)
    return table


# ---------------------------------------------------------------------------
# marginals


def marginal_counts(
    table: RestructuredTable,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Raw category counts: households for household vars, non-NA persons
    (per variable) for person vars. Person count vectors exclude NA."""
    schema = table.schema
    hh = {
        v.name: np.zeros(v.width, dtype=np.int64) for v in schema.household_vars
    }
    pp = {
        v.name: np.zeros(v.width - 1, dtype=np.int64) for v in schema.person_vars
    }
    p_names = schema.person_names
    for values, row_slots in zip(table.households, table.slots):
        for var, value in zip(schema.household_vars, values):
            hh[var.name][var.index(value)] += 1
        for slot in row_slots:
            if slot is None:
                continue
            for k, name in enumerate(p_names):
                var = schema.person_var(name)
                if slot[k] == NA:
                    continue
                pp[name][var.index(slot[k])] += 1
    return hh, pp


def empirical_marginals(table: RestructuredTable) -> TargetMarginals:
    """Observed proportions; NA never enters a person variable's numerator
    or denominator."""
    if table.n_rows == 0:
        raise DataError("cannot compute marginals of an empty table")
    hh_counts, p_counts = marginal_counts(table)
    hh = {name: c / c.sum() for name, c in hh_counts.items()}
    persons = {}
    for name, c in p_counts.items():
        total = c.sum()
        if total == 0:
            raise DataError(f"no persons with a non-NA value for {name!r}")
        persons[name] = c / total
    anchor_counts = p_counts[table.schema.slot_anchor]
    return TargetMarginals(
        household_targets=hh,
        person_targets=persons,
        n_households=table.n_rows,
        n_persons=int(anchor_counts.sum()),
    )


def load_target_marginals(path, schema: Schema) -> TargetMarginals:
    rows = _read_rows(path, ["variable", "category", "count_or_proportion"])
    by_var: dict[str, dict[str, float]] = {}
    n_households = None
    n_persons = None
    for row in rows:
        var, cat = row["variable"], row["category"]
        raw = row["count_or_proportion"]
        if var == N_HOUSEHOLDS_KEY:
            n_households = int(float(raw))
            continue
        if var == N_PERSONS_KEY:
            n_persons = int(float(raw))
            continue
        value = float(raw)
        if value < 0:
            raise DataError(f"negative count for {var!r}/{cat!r} in {path}")
        by_var.setdefault(var, {})
        if cat in by_var[var]:
            raise DataError(f"duplicate row for {var!r}/{cat!r} in {path}")
        by_var[var][cat] = value

    if n_households is None:
        raise DataError(f"{path}: missing {N_HOUSEHOLDS_KEY} row")
    if n_households <= 0:
        raise DataError(f"{path}: household total must be positive")

    def vector(var: Variable, cats: tuple[str, ...]) -> np.ndarray:
        got = by_var.pop(var.name, None)
        if got is None:
            raise DataError(f"{path}: no rows for variable {var.name!r}")
        unknown = set(got) - set(cats)
        if unknown:
            raise DataError(
                f"{path}: unknown categor{'ies' if len(unknown) > 1 else 'y'} "
                f"{sorted(unknown)} for variable {var.name!r}"
            )
        vec = np.array([got.get(c, 0.0) for c in cats], dtype=np.float64)
        total = vec.sum()
        if total <= 0:
            raise DataError(f"{path}: variable {var.name!r} has zero total")
        if abs(total - 1.0) > 1e-9:
            vec = vec / total
        return vec

    hh = {v.name: vector(v, v.categories) for v in schema.household_vars}
    persons = {}
    for v in schema.person_vars:
        if v.name in by_var and NA in by_var[v.name]:
            raise DataError(
                f"{path}: person variable {v.name!r} must not list an NA target"
            )
        persons[v.name] = vector(v, v.categories[:-1])
    if by_var:
        raise DataError(f"{path}: rows for unknown variable(s) {sorted(by_var)}")
    return TargetMarginals(hh, persons, n_households, n_persons)


def write_target_marginals(targets: TargetMarginals, schema: Schema, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variable", "category", "count_or_proportion"])
        for var in schema.household_vars:
            for cat, p in zip(var.categories, targets.household_targets[var.name]):
                writer.writerow([var.name, cat, f"{p:.12g}"])
        for var in schema.person_vars:
            for cat, p in zip(var.categories[:-1], targets.person_targets[var.name]):
                writer.writerow([var.name, cat, f"{p:.12g}"])
        writer.writerow([N_HOUSEHOLDS_KEY, "", targets.n_households])
        if targets.n_persons is not None:
            writer.writerow([N_PERSONS_KEY, "", targets.n_persons])


# ---------------------------------------------------------------------------
# plain-text writers for inspection


def write_restructured(table: RestructuredTable, path) -> None:
    schema = table.schema
    header = ["household_id", *schema.household_names]
    for s in range(schema.n_window):
        header.extend(f"{name}__s{s}" for name in schema.person_names)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for hid, values, row_slots in zip(
            table.household_ids, table.households, table.slots
        ):
            row = [hid, *values]
            for slot in row_slots:
                row.extend(slot if slot is not None else (NA,) * len(schema.person_vars))
            writer.writerow(row)


def write_encoded(matrix: EncodedMatrix, schema: Schema, path) -> None:
    header = []
    for g in matrix.groups:
        var = (
            schema.household_var(g.var) if g.slot is None else schema.person_var(g.var)
        )
        prefix = g.var if g.slot is None else f"{g.var}__s{g.slot}"
        header.extend(f"{prefix}={c}" for c in var.categories)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in matrix.values:
            writer.writerow([f"{v:.12g}" for v in row])
