import csv
import json

import numpy as np
import pytest

from popsynth.generation import (
    Provenance,
    SanityRule,
    default_rules,
    generate_inventory,
    inventory_from_table,
    load_rules,
    sanity_check,
    write_inventory,
    write_rules,
    write_sanity_report,
)
from popsynth.schema import (
    DataError,
    HouseholdRecord,
    restructure,
)
from popsynth.training import TrainConfig, init_latent, pretrain
from popsynth.vae import init_model

WIDTHS = (16, 14, 12, 12, 10, 8)


def trained_model(schema, encoded):
    model = init_model(schema, latent_dim=3, hidden_widths=WIDTHS, seed=5)
    pretrain(
        model,
        encoded,
        TrainConfig(epochs=30, decay_start_epoch=10, seed=2, kl_weight=0.1,
                    focal_gamma=0.0, initial_lr=3e-3),
    )
    return model


def test_inventory_from_table_drops_empty(tiny_schema, tiny_table):
    slots = list(tiny_table.slots)
    slots[2] = (None, None)
    tiny_table.slots = slots
    inv = inventory_from_table(tiny_table, Provenance())
    assert inv.n_households == 3
    assert inv.provenance.dropped_households == 1
    # household ids are sequential from 1 after the drop
    assert [hid for hid, _ in inv.households] == ["1", "2", "3"]


def test_inventory_referential_integrity(tiny_table):
    inv = inventory_from_table(tiny_table, Provenance())
    hh_ids = {hid for hid, _ in inv.households}
    assert all(hid in hh_ids for _, hid, _ in inv.persons)
    sizes = {hid: 0 for hid in hh_ids}
    for _, hid, _ in inv.persons:
        sizes[hid] += 1
    occupied = [sum(s is not None for s in row) for row in tiny_table.slots]
    assert sorted(sizes.values()) == sorted(occupied)


def test_generate_inventory_is_deterministic(tiny_schema, tiny_encoded):
    model = trained_model(tiny_schema, tiny_encoded)
    latent = init_latent(20, model.latent_dim, seed=3)
    a = generate_inventory(model, latent, tiny_schema)
    b = generate_inventory(model, latent, tiny_schema)
    assert a.households == b.households
    assert a.persons == b.persons
    assert a.provenance.model_fingerprint == model.checksum()
    assert a.provenance.latent_seed == 3
    assert a.provenance.n_latent_rows == 20


def test_generate_inventory_rejects_wrong_schema(tiny_schema, tiny_encoded):
    model = trained_model(tiny_schema, tiny_encoded)
    latent = init_latent(5, model.latent_dim, seed=3)
    with pytest.raises(DataError):
        generate_inventory(model, latent, tiny_schema.with_n_window(3))


def test_generate_inventory_leaves_model_untouched(tiny_schema, tiny_encoded):
    model = trained_model(tiny_schema, tiny_encoded)
    before = model.checksum()
    generate_inventory(model, init_latent(10, model.latent_dim, seed=1), tiny_schema)
    assert model.checksum() == before


def test_write_inventory_files(tiny_table, tmp_path):
    inv = inventory_from_table(tiny_table, Provenance(mode="argmax", seed=None))
    paths = write_inventory(inv, tmp_path)
    assert set(paths) == {"households.csv", "persons.csv", "provenance.json"}
    with open(paths["households.csv"]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["household_id", "OWN", "CAR"]
    assert len(rows) == 1 + inv.n_households
    with open(paths["persons.csv"]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["person_id", "household_id", "AGE", "JOB"]
    prov = json.loads(open(paths["provenance.json"]).read())
    assert prov["mode"] == "argmax"


def test_inventory_round_trips_through_restructure(tiny_schema, tiny_table):
    inv = inventory_from_table(tiny_table, Provenance())
    table2 = restructure(inv.to_records(), tiny_schema)
    assert sorted(table2.households) == sorted(tiny_table.households)


# -- sanity rules ------------------------------------------------------------


@pytest.fixture
def senior_rule():
    return SanityRule(
        rule_id="old_flag",
        household_var="OWN",
        household_value="yes",
        person_var="AGE",
        person_categories=("old",),
        direction="both",
    )


def fixture_records():
    """20 households; exactly one violation of each kind planted."""
    recs = []
    for i in range(9):
        recs.append(
            HouseholdRecord(f"ok{i}", ("yes", "0"), [("old", "none")])
        )
    for i in range(9):
        recs.append(
            HouseholdRecord(f"no{i}", ("no", "1"), [("adult", "full")])
        )
    # flag set but no senior member
    recs.append(HouseholdRecord("bad_flag", ("yes", "0"), [("kid", "none")]))
    # senior member but flag missing
    recs.append(HouseholdRecord("bad_member", ("no", "0"), [("old", "part")]))
    return recs


def test_sanity_check_finds_planted_violations(tiny_schema, senior_rule):
    table = restructure(fixture_records(), tiny_schema)
    report = sanity_check(table, [senior_rule])
    hits = report.violations["old_flag"]
    assert ("bad_flag", "flag_without_member") in hits
    assert ("bad_member", "member_without_flag") in hits
    assert len(hits) == 2
    assert report.total_households == 20


def test_sanity_check_clean_table(tiny_schema, senior_rule):
    table = restructure(fixture_records()[:18], tiny_schema)
    report = sanity_check(table, [senior_rule])
    assert report.violations["old_flag"] == []


def test_sanity_check_direction_one_way(tiny_schema, senior_rule):
    from dataclasses import replace

    table = restructure(fixture_records(), tiny_schema)
    only_flag = replace(senior_rule, direction="flag_implies_member")
    hits = sanity_check(table, [only_flag]).violations["old_flag"]
    assert hits == [("bad_flag", "flag_without_member")]


def test_sanity_check_unknown_variable(tiny_schema, senior_rule):
    from dataclasses import replace

    table = restructure(fixture_records()[:2], tiny_schema)
    bad = replace(senior_rule, household_var="NOPE")
    with pytest.raises(DataError):
        sanity_check(table, [bad])


def test_sanity_check_works_on_inventory(tiny_schema, senior_rule):
    table = restructure(fixture_records(), tiny_schema)
    inv = inventory_from_table(table, Provenance())
    report = sanity_check(inv, [senior_rule])
    assert sum(len(v) for v in report.violations.values()) == 2


def test_rules_file_round_trip(senior_rule, tmp_path):
    p = tmp_path / "rules.json"
    write_rules([senior_rule], p)
    back = load_rules(p)
    assert back == [senior_rule]


def test_load_rules_rejects_bad_direction(tmp_path):
    p = tmp_path / "rules.json"
    p.write_text(
        json.dumps(
            [
                {
                    "id": "r",
                    "household_var": "OWN",
                    "household_value": "yes",
                    "person_var": "AGE",
                    "person_categories": ["old"],
                    "direction": "sideways",
                }
            ]
        )
    )
    with pytest.raises(ValueError):
        load_rules(p)


def test_default_rules_empty_without_convention(tiny_schema):
    assert default_rules(tiny_schema) == []


def test_sanity_report_file(tiny_schema, senior_rule, tmp_path):
    table = restructure(fixture_records(), tiny_schema)
    report = sanity_check(table, [senior_rule])
    p = tmp_path / "sanity.json"
    write_sanity_report(report, p)
    payload = json.loads(p.read_text())
    assert payload["total_households"] == 20
    assert sum(payload["counts"].values()) == 2
    assert payload["rates"]["old_flag"] == pytest.approx(0.1)
