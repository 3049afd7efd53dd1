import numpy as np
import pytest

from conftest import smib
from islandpsi.coherency import GeneratorPartition
from islandpsi.dynamics import SimConfig, simulate, trip_branch, trip_load
from islandpsi.harness import RunConfig, _distance, bundled_scenario, prepare
from islandpsi.islanding import (IslandingExecutor, IslandingPlan, IslandOutcome, PlanError, RunOutcome,
                                 assess_outcome, compare_load_loss, derive_plan, execute_islanding,
                                 write_outcome_csv)

THREE_GROUPS = GeneratorPartition((("G1", "G2", "G3"), ("G8", "G9", "G10"), ("G4", "G5", "G6", "G7")))
BOUNDARY_CUTSET = {"1-39", "3-4", "14-15", "16-17"}


# --- plans --------------------------------------------------------------------

def test_three_group_partition_gives_reference_cutset(case39):
    plan = derive_plan(THREE_GROUPS, case39)
    assert plan.boundary_branches == BOUNDARY_CUTSET
    for bid in plan.boundary_branches:
        br = case39.branch(bid)
        assert plan.regions[br.from_bus] != plan.regions[br.to_bus]
    for g, members in enumerate(THREE_GROUPS.groups):
        assert all(plan.regions[case39.machine(m).bus] == g for m in members)


def test_two_singleton_groups_cut_their_line():
    case = smib()
    plan = derive_plan(GeneratorPartition((("INF",), ("G",))), case)
    assert plan.boundary_branches == {"2-1"}


def test_single_group_rejected(case39):
    with pytest.raises(PlanError):
        derive_plan(GeneratorPartition((tuple(case39.machine_ids),)), case39)


def test_unknown_machine_rejected(case39):
    with pytest.raises(PlanError):
        derive_plan(GeneratorPartition((("G1",), ("G99",))), case39)


def test_unreachable_buses_rejected(case39):
    case = case39.with_branch_status("12-11", "out").with_branch_status("12-13", "out")
    with pytest.raises(PlanError, match="unreachable"):
        derive_plan(THREE_GROUPS, case)


def test_plan_arming_copy():
    plan = IslandingPlan(frozenset({"a"}), {})
    assert plan.armed_at(2.0).arm_time == 2.0 and plan.arm_time is None


# --- outcome accounting ----------------------------------------------------------------

def test_load_conservation_in_outcomes(case39, init39):
    runs = [
        [],
        [trip_branch(0.1, b) for b in BOUNDARY_CUTSET],
        [trip_branch(0.1, "12-11"), trip_branch(0.1, "12-13"), trip_load(0.2, 4)],
    ]
    for ev in runs:
        traj = simulate(case39, init39, ev, SimConfig(t_end=0.5))
        out = assess_outcome(case39, traj)
        assert out.served + out.lost + out.deenergized == pytest.approx(out.total_load, abs=1e-12)
        assert out.served <= out.total_load
    load = {b.id: b.load_p for b in case39.buses}
    assert out.deenergized == pytest.approx(load[12])
    assert out.tripped == pytest.approx(load[4])


def _outcome(served_frac, total=10.0):
    isl = (IslandOutcome(0, ("G1",), (1,), served_frac * total, True),
           IslandOutcome(1, ("G2",), (2,), (1 - served_frac) * total, False))
    return RunOutcome("x", total, isl, 0.0, 0.0)


def test_comparison_arithmetic():
    same = compare_load_loss(_outcome(0.5), _outcome(0.5))
    assert same.saving == 0.0
    blackout = RunOutcome("x", 10.0, (IslandOutcome(0, ("G1",), (1,), 10.0, False),), 0.0, 0.0)
    cmp = compare_load_loss(_outcome(0.6), blackout)
    assert cmp.saving == pytest.approx(6.0) and cmp.saving_fraction == pytest.approx(0.6)
    assert cmp.lost_without == 10.0


def test_comparison_rejects_different_cases():
    other = RunOutcome("y", 10.0, (), 0.0, 0.0)
    with pytest.raises(ValueError):
        compare_load_loss(_outcome(0.5), other)


def test_outcome_csv():
    text = write_outcome_csv(_outcome(0.6))
    assert text.splitlines() == ["island_id,machines,load_served_mw,survived", "0,G1,600.0,1", "1,G2,0.0,0"]


# --- execution -----------------------------------------------------------------------------

def test_unarmed_executor_is_a_no_op(case39, init39):
    plan = derive_plan(THREE_GROUPS, case39)
    ev = [trip_branch(1.0, "16-17")]
    cfg = SimConfig(t_end=3.0)
    ex = IslandingExecutor(plan)
    a = simulate(case39, init39, ev, cfg, relays=[ex])
    b = simulate(case39, init39, ev, cfg)
    assert np.array_equal(a.delta, b.delta) and ex.trips == [] and ex.arm_time is None


def test_already_open_boundary_branch_is_not_armed(case39, init39):
    plan = derive_plan(THREE_GROUPS, case39)
    traj, out, ex = execute_islanding(case39, init39, [trip_branch(1.0, "3-4")], SimConfig(t_end=1.5),
                                      plan, arm_time=1.2)
    assert ex.arm_time == pytest.approx(1.2)
    assert ex.armed_branches == ("1-39", "14-15", "16-17")


@pytest.fixture(scope="module")
def scenario_b_manual(case39):
    spec = bundled_scenario("scenario_b")
    prep = prepare(case39, spec)
    plan = derive_plan(prep.partition, prep.case)
    cfg = RunConfig().sim_config(spec.t_end)
    on = execute_islanding(prep.case, prep.init, spec.events, cfg, plan, 3.3, relays=_distance(prep.case, spec))
    off = simulate(prep.case, prep.init, spec.events, cfg.__class__(**{**cfg.__dict__, "on_divergence": "isolate"}),
                   relays=_distance(prep.case, spec))
    return prep, plan, on, assess_outcome(prep.case, off)


def test_manual_arming_splits_scenario_b(scenario_b_manual):
    prep, plan, (traj, out, ex), _ = scenario_b_manual
    assert set(ex.armed_branches) == set(plan.boundary_branches)
    tripped = {b for _, b in ex.trips}
    assert tripped == set(plan.boundary_branches)
    assert all(t - ex.arm_time <= 5.0 for t, _ in ex.trips)
    assert any(i.survived for i in out.islands)


def test_split_islands_are_block_disjoint(scenario_b_manual):
    _, _, (traj, _, _), _ = scenario_b_manual
    ep = traj.final_epoch
    assert len(ep.islands) >= 2
    y = ep.reduced.y_red
    for i, a in enumerate(ep.islands):
        for b in ep.islands[i + 1:]:
            assert np.all(y[np.ix_(a.positions, b.positions)] == 0)


def test_manual_islanding_serves_more_load_in_scenario_b(scenario_b_manual):
    _, _, (_, on, _), off = scenario_b_manual
    cmp = compare_load_loss(on, off)
    assert cmp.served_with >= cmp.served_without


@pytest.mark.parametrize("name", ["scenario_a", "scenario_a_13_14"])
def test_scenario_a_boundary_relays_trip_and_an_island_survives(case39, name):
    """Boundary relays armed 40 ms after the second switching."""
    spec = bundled_scenario(name)
    prep = prepare(case39, spec)
    plan = derive_plan(prep.partition, prep.case)
    arm = max(e.time for e in spec.events) + 0.04
    traj, out, ex = execute_islanding(prep.case, prep.init, spec.events, RunConfig().sim_config(spec.t_end),
                                      plan, arm, relays=_distance(prep.case, spec))
    tripped = {b for t, b in ex.trips if t - ex.arm_time <= 5.0}
    assert tripped == set(ex.armed_branches), f"armed {ex.armed_branches}, tripped {sorted(tripped)}"
    assert any(i.survived for i in out.islands)
