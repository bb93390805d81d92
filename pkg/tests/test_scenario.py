import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slicesim import scenario as sc
from slicesim.simcli import SimConfig


def make_drop(dmin=100.0, dmax=200.0, length=2000.0, seed=3, video_fraction=0.5):
    cfg = SimConfig(density_min_m=dmin, density_max_m=dmax,
                    highway_length_m=length, video_fraction=video_fraction)
    return sc.generate_drop(cfg, np.random.default_rng(seed))


def circular_gaps(xs, length):
    xs = np.sort(xs)
    gaps = np.diff(xs)
    return np.concatenate([gaps, [length - xs[-1] + xs[0]]])


def test_vehicle_ids_dense_and_ordered():
    drop = make_drop()
    assert [v.vid for v in drop.vehicles] == list(range(len(drop.vehicles)))


def test_lane_geometry_and_directions():
    drop = make_drop()
    for v in drop.vehicles:
        assert v.position.y == pytest.approx(v.lane * sc.LANE_WIDTH_M)
        assert v.direction == (-1 if v.lane < 3 else 1)
        assert v.speed == pytest.approx(sc.SPEED_MPS)
    lanes = {v.lane for v in drop.vehicles}
    assert lanes == set(range(sc.LANE_COUNT))


@pytest.mark.parametrize("dmin,dmax", [(1.0, 100.0), (100.0, 200.0), (200.0, 300.0)])
def test_gaps_stay_inside_band_per_lane(dmin, dmax):
    length = 2000.0
    for seed in range(1, 6):
        drop = make_drop(dmin, dmax, length, seed)
        for lane in range(sc.LANE_COUNT):
            xs = np.array([v.position.x for v in drop.vehicles if v.lane == lane])
            assert len(xs) >= 2
            gaps = circular_gaps(xs, length)
            assert np.all(gaps >= dmin - 1e-9)
            assert np.all(gaps <= dmax + 1e-9)


def test_rsu_grid_is_even_and_sized_from_nominal_spacing():
    drop = make_drop(length=2000.0)
    n = int(np.ceil(2000.0 / sc.RSU_SPACING_M))
    assert len(drop.rsus) == n
    xs = np.array([r.position.x for r in drop.rsus])
    gaps = circular_gaps(xs, 2000.0)
    assert np.allclose(gaps, 2000.0 / n)
    assert all(r.position.y == sc.RSU_LATERAL_M for r in drop.rsus)


def test_rsu_count_grows_with_length():
    assert len(make_drop(length=2000.0).rsus) == 2
    assert len(make_drop(length=6000.0).rsus) == 4  # ceil(6000/1732)


def test_generate_drop_rejects_bad_inputs():
    with pytest.raises(ValueError):
        make_drop(dmin=200.0, dmax=100.0)
    with pytest.raises(ValueError):
        make_drop(dmin=0.0, dmax=100.0)
    with pytest.raises(ValueError):
        make_drop(dmin=100.0, dmax=300.0, length=500.0)  # shorter than 2*dmax


def test_video_fraction_extremes():
    assert not any(v.wants_video for v in make_drop(video_fraction=0.0).vehicles)
    assert all(v.wants_video for v in make_drop(video_fraction=1.0).vehicles)


def test_step_mobility_wraps_and_preserves_lane():
    drop = make_drop()
    stepped = sc.step_mobility(drop, 1.0)
    for before, after in zip(drop.vehicles, stepped.vehicles):
        assert 0.0 <= after.position.x < drop.highway_length
        expected = (before.position.x + before.direction * before.speed) % drop.highway_length
        assert after.position.x == pytest.approx(expected)
        assert after.position.y == before.position.y


def test_step_mobility_zero_dt_is_identity():
    drop = make_drop()
    assert sc.step_mobility(drop, 0.0) == drop
    with pytest.raises(ValueError):
        sc.step_mobility(drop, -0.1)


def test_same_direction_vehicles_keep_their_spacing():
    drop = make_drop()
    lane0 = [v for v in drop.vehicles if v.lane == 0]
    a, b = lane0[0], lane0[1]
    d0 = sc.distance(a.position, b.position, drop.highway_length)
    moved = sc.step_mobility(drop, 2.5)
    a2 = next(v for v in moved.vehicles if v.vid == a.vid)
    b2 = next(v for v in moved.vehicles if v.vid == b.vid)
    assert sc.distance(a2.position, b2.position, drop.highway_length) == pytest.approx(d0)


@given(
    xa=st.floats(0.0, 1999.9),
    xb=st.floats(0.0, 1999.9),
    ya=st.floats(-35.0, 20.0),
    yb=st.floats(-35.0, 20.0),
)
def test_distance_symmetric_and_wrap_bounded(xa, xb, ya, yb):
    length = 2000.0
    pa, pb = sc.Position(xa, ya), sc.Position(xb, yb)
    d1 = sc.distance(pa, pb, length)
    d2 = sc.distance(pb, pa, length)
    assert d1 == pytest.approx(d2)
    assert d1 >= abs(ya - yb) - 1e-12
    # wrap distance along x can never exceed half the loop
    assert d1 <= np.hypot(length / 2.0, ya - yb) + 1e-9


def test_wrap_shifts_do_not_change_distance():
    length = 2000.0
    pa, pb = sc.Position(10.0, 0.0), sc.Position(1990.0, 4.0)
    assert sc.distance(pa, pb, length) == pytest.approx(np.hypot(20.0, 4.0))


def test_pairwise_distances_matches_scalar():
    drop = make_drop(seed=7)
    xs = np.array([v.position.x for v in drop.vehicles[:8]])
    ys = np.array([v.position.y for v in drop.vehicles[:8]])
    mat = sc.pairwise_distances(xs, ys, xs, ys, drop.highway_length)
    for i in range(8):
        for j in range(8):
            want = sc.distance(drop.vehicles[i].position, drop.vehicles[j].position,
                               drop.highway_length)
            assert mat[i, j] == pytest.approx(want)


def test_scenario_csv_round_trip(tmp_path):
    drop = make_drop(seed=11)
    path = tmp_path / "drop.csv"
    sc.write_scenario_csv(drop, path)
    loaded = sc.read_scenario_csv(path)
    assert loaded == list(drop.vehicles)


def test_scenario_csv_rejects_foreign_header(tmp_path):
    path = tmp_path / "bogus.csv"
    path.write_text("# some-other-format\nid,x\n")
    with pytest.raises(ValueError):
        sc.read_scenario_csv(path)


def test_drop_is_deterministic_per_stream_seed():
    a = make_drop(seed=5)
    b = make_drop(seed=5)
    assert a == b
    assert make_drop(seed=6) != a
