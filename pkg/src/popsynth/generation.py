"""Decode latents into a synthetic inventory and check structural sanity rules.

An inventory is a pair of emitted tables (households, persons) with sequential
integer ids, plus a provenance record. Households whose decode produced zero
occupied person slots are dropped and counted.

Sanity rules are data, not code: each rule links a household flag value to a
set of person categories and is checked in one or both directions per
household (flag set but no qualifying member / qualifying member but flag not
set).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .schema import (
    NA,
    DataError,
    EncodedMatrix,
    HouseholdRecord,
    RestructuredTable,
    Schema,
    decode_onehot_with_stats,
)

DIRECTIONS = ("flag_implies_member", "member_implies_flag", "both")


@dataclass
class Provenance:
    model_fingerprint: str = ""
    schema_fingerprint: str = ""
    mode: str = "argmax"
    seed: int | None = None
    tract_id: str | None = None
    latent_seed: int | None = None
    n_latent_rows: int = 0
    dropped_households: int = 0
    forced_na_cells: int = 0
    toolkit_version: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SyntheticInventory:
    schema: Schema
    households: list[tuple[str, tuple[str, ...]]]
    persons: list[tuple[str, str, tuple[str, ...]]]
    provenance: Provenance

    @property
    def n_households(self) -> int:
        return len(self.households)

    def to_records(self) -> list[HouseholdRecord]:
        by_household: dict[str, list[tuple[str, ...]]] = {h: [] for h, _ in self.households}
        for _, hid, values in self.persons:
            by_household[hid].append(values)
        return [
            HouseholdRecord(hid, values, by_household[hid])
            for hid, values in self.households
        ]


def inventory_from_table(
    table: RestructuredTable, provenance: Provenance
) -> SyntheticInventory:
    """Emit occupied slots as person rows; drop and count empty households."""
    households, persons = [], []
    hid = pid = 0
    dropped = 0
    for values, row_slots in zip(table.households, table.slots):
        occupied = [s for s in row_slots if s is not None]
        if not occupied:
            dropped += 1
            continue
        hid += 1
        households.append((str(hid), values))
        for slot in occupied:
            pid += 1
            persons.append((str(pid), str(hid), slot))
    provenance.dropped_households = dropped
    return SyntheticInventory(table.schema, households, persons, provenance)


def generate_inventory(
    model,
    latent,
    schema: Schema,
    mode: str = "argmax",
    seed: int | None = None,
    tract_id: str | None = None,
    toolkit_version: str = "",
) -> SyntheticInventory:
    """Decode the latent matrix with the frozen decoder (eval-mode batch norm)
    and translate the rows into an inventory."""
    if schema.fingerprint() != model.schema_fingerprint:
        raise DataError("schema does not match the model's schema fingerprint")
    probs = model.decode(np.asarray(latent.z, dtype=np.float64), train=False)
    matrix = EncodedMatrix(probs, model.groups, model.schema_fingerprint)
    table, stats = decode_onehot_with_stats(matrix, schema, mode=mode, seed=seed)
    prov = Provenance(
        model_fingerprint=model.checksum(),
        schema_fingerprint=model.schema_fingerprint,
        mode=mode,
        seed=seed,
        tract_id=tract_id,
        latent_seed=getattr(latent, "seed", None),
        n_latent_rows=latent.z.shape[0],
        forced_na_cells=stats.forced_na_cells,
        toolkit_version=toolkit_version,
    )
    return inventory_from_table(table, prov)


def write_inventory(inventory: SyntheticInventory, out_dir) -> dict[str, str]:
    """households.csv, persons.csv and provenance.json under out_dir."""
    schema = inventory.schema
    paths = {}
    hh_path = os.path.join(out_dir, "households.csv")
    with open(hh_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["household_id", *schema.household_names])
        for hid, values in inventory.households:
            writer.writerow([hid, *values])
    paths["households.csv"] = hh_path

    p_path = os.path.join(out_dir, "persons.csv")
    with open(p_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["person_id", "household_id", *schema.person_names])
        for pid, hid, values in inventory.persons:
            writer.writerow([pid, hid, *values])
    paths["persons.csv"] = p_path

    prov_path = os.path.join(out_dir, "provenance.json")
    with open(prov_path, "w", encoding="utf-8") as fh:
        json.dump(inventory.provenance.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["provenance.json"] = prov_path
    return paths


# ---------------------------------------------------------------------------
# sanity rules


@dataclass(frozen=True)
class SanityRule:
    rule_id: str
    household_var: str
    household_value: str
    person_var: str
    person_categories: tuple[str, ...]
    direction: str = "both"

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(
                f"rule {self.rule_id!r}: direction must be one of {DIRECTIONS}"
            )


def load_rules(path) -> list[SanityRule]:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    entries = raw["rules"] if isinstance(raw, dict) else raw
    return [
        SanityRule(
            rule_id=e["id"],
            household_var=e["household_var"],
            household_value=e["household_value"],
            person_var=e["person_var"],
            person_categories=tuple(e["person_categories"]),
            direction=e.get("direction", "both"),
        )
        for e in entries
    ]


def write_rules(rules: list[SanityRule], path) -> None:
    payload = {
        "rules": [
            {
                "id": r.rule_id,
                "household_var": r.household_var,
                "household_value": r.household_value,
                "person_var": r.person_var,
                "person_categories": list(r.person_categories),
                "direction": r.direction,
            }
            for r in rules
        ]
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def default_rules(schema: Schema) -> list[SanityRule]:
    """Presence-flag rules derived from conventional variable names.

    When the schema carries R65/R18 household flags and an AGEP person
    variable with standard five-year bins, tie the flags to membership of the
    matching age range. Schemas without those names get no default rules.
    """
    rules = []
    hh_names = set(schema.household_names)
    if "AGEP" not in set(schema.person_names):
        return rules
    ages = schema.person_var("AGEP").categories[:-1]
    if "R65" in hh_names and "65-69" in ages:
        seniors = ages[ages.index("65-69") :]
        rules.append(
            SanityRule("R65", "R65", "Yes", "AGEP", tuple(seniors), "both")
        )
    if "R18" in hh_names and "15-19" in ages:
        minors = ages[: ages.index("15-19") + 1]
        rules.append(
            SanityRule("R18", "R18", "Yes", "AGEP", tuple(minors), "both")
        )
    return rules


@dataclass
class SanityReport:
    total_households: int
    violations: dict[str, list[tuple[str, str]]] = field(default_factory=dict)

    @property
    def counts(self) -> dict[str, int]:
        return {rule: len(v) for rule, v in self.violations.items()}

    @property
    def rates(self) -> dict[str, float]:
        n = max(self.total_households, 1)
        return {rule: len(v) / n for rule, v in self.violations.items()}

    @property
    def total_violations(self) -> int:
        return sum(len(v) for v in self.violations.values())


def sanity_check(target, rules: list[SanityRule]) -> SanityReport:
    """Check every rule against every household of an inventory or
    restructured table; violations are (household_id, kind) pairs."""
    records = target.to_records()
    schema = target.schema
    hh_index = {name: i for i, name in enumerate(schema.household_names)}
    p_index = {name: i for i, name in enumerate(schema.person_names)}
    report = SanityReport(total_households=len(records))
    for rule in rules:
        if rule.household_var not in hh_index:
            raise DataError(f"rule {rule.rule_id!r}: unknown household variable "
                            f"{rule.household_var!r}")
        if rule.person_var not in p_index:
            raise DataError(
                f"rule {rule.rule_id!r}: unknown person variable {rule.person_var!r}"
            )
        hits = []
        hv, pv = hh_index[rule.household_var], p_index[rule.person_var]
        wanted = set(rule.person_categories)
        for rec in records:
            flag = rec.values[hv] == rule.household_value
            member = any(p[pv] in wanted for p in rec.persons)
            if (
                rule.direction in ("flag_implies_member", "both")
                and flag
                and not member
            ):
                hits.append((rec.household_id, "flag_without_member"))
            if (
                rule.direction in ("member_implies_flag", "both")
                and member
                and not flag
            ):
                hits.append((rec.household_id, "member_without_flag"))
        report.violations[rule.rule_id] = hits
    return report


def write_sanity_report(report: SanityReport, path) -> None:
    payload = {
        "total_households": report.total_households,
        "counts": report.counts,
        "rates": report.rates,
        "violations": {k: [list(v) for v in vs] for k, vs in report.violations.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
