import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from peerbias.errors import NotFoundError, ParseError, SchemaError
from peerbias.features import (FeatureSchema, UserFeatures, build_design, design_matrix, extended_features,
                               peer_influence, read_users_csv, write_users_csv, zscore_columns)

from conftest import snowball_from_edges, users_for


def star(n_leaves):
    return snowball_from_edges([(0, i) for i in range(1, n_leaves + 1)], 0)


def test_peer_influence_fraction():
    s = star(4)
    assert peer_influence(0, s, {1: {7}}, [7]) == pytest.approx(0.25)


def test_peer_influence_takes_max_over_games():
    s = star(10)
    act = {i: {1} for i in (1, 2)} | {i: {2} for i in (3, 4, 5, 6, 7)}
    assert peer_influence(0, s, act, [1, 2]) == pytest.approx(0.5)


def test_peer_influence_no_friends():
    s = snowball_from_edges([], 3)
    assert peer_influence(3, s, {}, [1]) == 0.0


def test_peer_influence_unknown_user():
    with pytest.raises(NotFoundError):
        peer_influence(99, star(2), {}, [1])


@given(st.integers(1, 12), st.data())
def test_peer_influence_monotone(n, data):
    s = star(n)
    active = data.draw(st.sets(st.integers(1, n)))
    act = {i: {1} for i in active}
    base = peer_influence(0, s, act, [1])
    extra = data.draw(st.integers(1, n))
    act2 = dict(act)
    act2[extra] = {1}
    assert peer_influence(0, s, act2, [1]) >= base


def test_user_features_validation():
    with pytest.raises(ValueError):
        UserFeatures(1, 0, 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        UserFeatures(1, 0, 20.0, float("nan"), 1.0)


def test_users_csv_round_trip(tmp_path):
    users = users_for(range(5), rng=np.random.default_rng(0))
    write_users_csv(users, tmp_path / "u.csv")
    back = read_users_csv(tmp_path / "u.csv")
    assert sorted(back) == sorted(users)
    for k in users:
        assert back[k].age == pytest.approx(users[k].age, rel=1e-5)


def test_users_csv_bad_row(tmp_path):
    p = tmp_path / "u.csv"
    p.write_text("id,gender,age,photos_log,comments_log\n1,0,-3,1,1\n")
    with pytest.raises(ParseError, match="line 2"):
        read_users_csv(p)


def _two_friend_setup(user_age=25.0):
    s = snowball_from_edges([(0, 1), (0, 2)], 0)
    feats = {0: UserFeatures(0, 1, user_age, 2.0, 3.0),
             1: UserFeatures(1, 1, 20.0, 2.0, 3.0),
             2: UserFeatures(2, 1, 30.0, 2.0, 3.0)}
    return s, feats


def test_distance_zero_at_friend_mean():
    s, feats = _two_friend_setup()
    ext = extended_features(0, s, feats)
    assert ext.distance == 0.0
    assert not ext.distance_flagged
    assert ext.fm_age == 25.0


def test_distance_uses_sample_sd():
    s, feats = _two_friend_setup(user_age=35.0)
    # |35 - 25| / sd(20, 30) with n-1 denominator
    assert extended_features(0, s, feats).distance == pytest.approx(10 / np.sqrt(50))


def test_single_friend_flags_distance():
    s = snowball_from_edges([(0, 1)], 0)
    ext = extended_features(0, s, users_for([0, 1]))
    assert ext.distance == 0.0
    assert ext.distance_flagged


def test_extended_structure_columns():
    s, feats = _two_friend_setup()
    ext = extended_features(0, s, feats)
    assert (ext.snowball_size, ext.components) == (3, 2)
    assert ext.snowball_density == pytest.approx(2 / 3)


def test_missing_features_named():
    s, feats = _two_friend_setup()
    del feats[2]
    with pytest.raises(NotFoundError, match="2"):
        extended_features(0, s, feats)


@given(st.floats(0.1, 10), st.floats(-5, 5), st.sampled_from(["age", "photos_log", "comments_log"]))
def test_distance_affine_invariant(a, b, col):
    rng = np.random.default_rng(3)
    s = snowball_from_edges([(0, i) for i in range(1, 6)], 0)
    feats = users_for(range(6), rng=rng)

    def scaled(u):
        vals = {"age": u.age, "photos_log": u.photos_log, "comments_log": u.comments_log}
        vals[col] = a * vals[col] + b + (0 if col != "age" else 20)
        return UserFeatures(u.id, u.gender, vals["age"], vals["photos_log"], vals["comments_log"])

    moved = {k: scaled(u) for k, u in feats.items()}
    assert extended_features(0, s, moved).distance == pytest.approx(extended_features(0, s, feats).distance,
                                                                    rel=1e-9, abs=1e-9)


def test_schema_validation():
    with pytest.raises(SchemaError):
        FeatureSchema(columns=("peer", "age", "age"))
    with pytest.raises(SchemaError):
        FeatureSchema(columns=("age",), homophily_columns=())
    with pytest.raises(SchemaError):
        FeatureSchema(columns=("peer", "shoe_size"), homophily_columns=())


def _design_fixture():
    s = snowball_from_edges([(0, 1), (0, 2), (1, 2), (2, 3)], 0,
                            installs={0: 1, 1: 0, 2: 1, 3: 0},
                            peer={0: (0.5,), 1: (0.5,), 2: (0.25, 0.75), 3: (1.0,)})
    users = users_for(range(4), rng=np.random.default_rng(1))
    coords = {m: (float(m), -float(m)) for m in range(4)}
    return s, users, coords


def test_design_widths():
    s, users, coords = _design_fixture()
    schema = FeatureSchema()
    naive = build_design(s, schema, "none", None, users)
    full = build_design(s, schema, "global", coords, users)
    assert len(naive[0].values) == len(schema.columns) - 2
    assert len(full[0].values) == len(schema.columns)
    assert full[2].values[-2:] == coords[2]
    assert [r.user_id for r in full] == list(s.members)
    assert [r.response for r in full] == [1, 0, 1, 0]
    assert full[2].values[schema.peer_index()] == 0.75


def test_design_missing_proxy_names_member():
    s, users, coords = _design_fixture()
    del coords[3]
    with pytest.raises(NotFoundError, match="member 3"):
        build_design(s, FeatureSchema(), "local", coords, users)


def test_design_deterministic():
    s, users, coords = _design_fixture()
    a = design_matrix(build_design(s, FeatureSchema(), "community", coords, users))
    b = design_matrix(build_design(s, FeatureSchema(), "community", coords, users))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@pytest.mark.parametrize("proxy", ["none", "global", "local", "community"])
def test_design_rows_equal_size(proxy):
    s, users, coords = _design_fixture()
    rows = build_design(s, FeatureSchema(), proxy, coords, users)
    assert len(rows) == len(s.members)
    assert all(0 <= r.values[0] <= 1 for r in rows)


def test_zscore_pooled():
    rng = np.random.default_rng(2)
    mats = [rng.normal(3, 2, (5, 3)), rng.normal(3, 2, (7, 3))]
    mats[0][:, 2] = 4.0
    mats[1][:, 2] = 4.0
    out = zscore_columns(mats, [1, 2])
    pooled = np.vstack(out)
    assert pooled[:, 1].mean() == pytest.approx(0, abs=1e-12)
    assert pooled[:, 1].std() == pytest.approx(1)
    assert np.all(pooled[:, 2] == 0)
    assert np.array_equal(out[0][:, 0], mats[0][:, 0])
