"""Kinematics tests against an independent matrix-chain oracle.

The oracle below rebuilds every arm transform from elementary Rx/Tx/Tz/Rz
matrices and never calls the library's dh_transform, so forward kinematics
and the closed-form IK are checked against a second, separately written
derivation.
"""

import math

import numpy as np
import pytest

from surgisim.kinematics import (
    AtSingularity,
    ChainTableError,
    DHRow,
    JointKind,
    JointOutOfRange,
    Pose,
    Unreachable,
    dh_transform,
    ecm_chain,
    fk_frames,
    forward_kinematics,
    inverse_kinematics_ecm,
    inverse_kinematics_psm,
    parse_chain_table,
    psm_chain,
    quat_angle,
)

L1, L2, L3 = 0.4318, 0.4162, 0.0091


# --- oracle -----------------------------------------------------------------

def _rx(a):
    t = np.eye(4)
    t[1, 1] = t[2, 2] = math.cos(a)
    t[1, 2] = -math.sin(a)
    t[2, 1] = math.sin(a)
    return t


def _rz(a):
    t = np.eye(4)
    t[0, 0] = t[1, 1] = math.cos(a)
    t[0, 1] = -math.sin(a)
    t[1, 0] = math.sin(a)
    return t


def _tx(d):
    t = np.eye(4)
    t[0, 3] = d
    return t


def _tz(d):
    t = np.eye(4)
    t[2, 3] = d
    return t


def oracle_psm_tip(q):
    """Tip transform from explicit elementary-matrix products (PSM block)."""
    q1, q2, q3, q4, q5, q6 = q
    rows = [
        _rx(math.pi / 2) @ _tx(0) @ _tz(0) @ _rz(q1 + math.pi / 2),
        _rx(-math.pi / 2) @ _tx(0) @ _tz(0) @ _rz(q2 - math.pi / 2),
        _rx(math.pi / 2) @ _tx(0) @ _tz(q3 - L1) @ _rz(0),
        _rx(0) @ _tx(0) @ _tz(L2) @ _rz(q4),
        _rx(-math.pi / 2) @ _tx(0) @ _tz(0) @ _rz(q5 - math.pi / 2),
        _rx(-math.pi / 2) @ _tx(L3) @ _tz(0) @ _rz(q6 - math.pi / 2),
    ]
    t = np.eye(4)
    for r in rows:
        t = t @ r
    return t


def oracle_psm_frames(q):
    q1, q2, q3, q4, q5, q6 = q
    rows = [
        _rx(math.pi / 2) @ _rz(q1 + math.pi / 2),
        _rx(-math.pi / 2) @ _rz(q2 - math.pi / 2),
        _rx(math.pi / 2) @ _tz(q3 - L1),
        _tz(L2) @ _rz(q4),
        _rx(-math.pi / 2) @ _rz(q5 - math.pi / 2),
        _rx(-math.pi / 2) @ _tx(L3) @ _rz(q6 - math.pi / 2),
    ]
    frames = [np.eye(4)]
    for r in rows:
        frames.append(frames[-1] @ r)
    return frames


def oracle_ecm_tip(q):
    q1, q2, q3, q4 = q
    rows = [
        _rx(math.pi / 2) @ _rz(q1 + math.pi / 2),
        _rx(-math.pi / 2) @ _rz(q2 - math.pi / 2),
        _rx(math.pi / 2) @ _tz(q3 - L1),
        _tz(L2) @ _rz(q4),
    ]
    t = np.eye(4)
    for r in rows:
        t = t @ r
    return t


def point_line_distance(point, a, b):
    ab = b - a
    return float(np.linalg.norm(np.cross(point - a, ab)) / np.linalg.norm(ab))


# --- dh_transform -----------------------------------------------------------

def test_dh_transform_all_zero_row_is_identity():
    row = DHRow(0.0, 0.0, 0.0, 0.0, JointKind.REVOLUTE, 0)
    assert np.allclose(dh_transform(row, 0.0), np.eye(4), atol=1e-15)


def test_dh_transform_psm_row1_matches_oracle():
    row = DHRow(0.0, math.pi / 2, 0.0, math.pi / 2, JointKind.REVOLUTE, 0)
    expected = _rx(math.pi / 2) @ _rz(math.pi / 2)
    assert np.allclose(dh_transform(row, 0.0), expected, atol=1e-15)


def test_dh_transform_prismatic_extension_cancels_offset():
    row = DHRow(0.0, math.pi / 2, -L1, 0.0, JointKind.PRISMATIC, 2)
    got = dh_transform(row, L1)
    assert np.allclose(got, _rx(math.pi / 2), atol=1e-15)


def test_dh_transform_is_rigid():
    rng = np.random.default_rng(7)
    for _ in range(200):
        row = DHRow(
            rng.uniform(-0.5, 0.5), rng.uniform(-math.pi, math.pi),
            rng.uniform(-0.5, 0.5), rng.uniform(-math.pi, math.pi),
            JointKind.REVOLUTE if rng.random() < 0.5 else JointKind.PRISMATIC, 0)
        t = dh_transform(row, rng.uniform(-1, 1))
        r = t[:3, :3]
        assert np.allclose(r.T @ r, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(r) - 1.0) < 1e-12


def test_dh_transform_random_rows_match_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        a, alpha = rng.uniform(-0.3, 0.3), rng.uniform(-math.pi, math.pi)
        d, theta = rng.uniform(-0.3, 0.3), rng.uniform(-math.pi, math.pi)
        q = rng.uniform(-1, 1)
        rev = DHRow(a, alpha, d, theta, JointKind.REVOLUTE, 0)
        expected = _rx(alpha) @ _tx(a) @ _tz(d) @ _rz(theta + q)
        assert np.allclose(dh_transform(rev, q), expected, atol=1e-14)
        pri = DHRow(a, alpha, d, theta, JointKind.PRISMATIC, 0)
        expected = _rx(alpha) @ _tx(a) @ _tz(d + q) @ _rz(theta)
        assert np.allclose(dh_transform(pri, q), expected, atol=1e-14)


# --- forward kinematics -----------------------------------------------------

def test_fk_neutral_matches_oracle_and_sits_on_rcm_axis():
    chain = psm_chain()
    q = np.zeros(6)
    q[2] = 0.12
    pose = forward_kinematics(chain, q)
    expected = oracle_psm_tip(q)
    assert np.allclose(pose.position, expected[:3, 3], atol=1e-12)
    assert np.allclose(pose.to_matrix()[:3, :3], expected[:3, :3], atol=1e-12)
    # neutral bend: tip on the RCM z-axis, below the pivot
    assert abs(pose.position[0]) < 1e-12 and abs(pose.position[1]) < 1e-12
    assert pose.position[2] < 0


def test_fk_insertion_moves_tip_along_shaft():
    chain = psm_chain()
    q = np.array([0.3, -0.2, 0.10, 0.5, 0.2, -0.4])
    q2 = q.copy()
    q2[2] += 0.01
    a = oracle_psm_tip(q)[:3, 3]
    b = oracle_psm_tip(q2)[:3, 3]
    da = forward_kinematics(chain, q).position
    db = forward_kinematics(chain, q2).position
    assert np.allclose(db - da, b - a, atol=1e-12)
    assert abs(np.linalg.norm(db - da) - 0.01) < 1e-12
    # displacement is along the shaft line (frame3 -> frame4)
    frames = oracle_psm_frames(q)
    shaft = frames[4][:3, 3] - frames[3][:3, 3]
    shaft /= np.linalg.norm(shaft)
    assert abs(abs(np.dot((db - da) / 0.01, shaft)) - 1.0) < 1e-9


def test_fk_ecm_neutral_matches_oracle():
    chain = ecm_chain()
    q = np.array([0.0, 0.0, 0.13, 0.0])
    pose = forward_kinematics(chain, q)
    expected = oracle_ecm_tip(q)
    assert np.allclose(pose.position, expected[:3, 3], atol=1e-12)
    assert abs(pose.position[0]) < 1e-12 and abs(pose.position[1]) < 1e-12


def test_fk_random_matches_oracle():
    chain = psm_chain()
    rng = np.random.default_rng(11)
    for _ in range(300):
        q = chain.random_joints(rng)
        got = forward_kinematics(chain, q)
        expected = oracle_psm_tip(q)
        assert np.allclose(got.position, expected[:3, 3], atol=1e-12)
        assert np.allclose(got.to_matrix()[:3, :3], expected[:3, :3], atol=1e-12)


def test_fk_rejects_out_of_limit_joints():
    chain = psm_chain()
    q = np.zeros(6)
    q[0] = 3.0
    with pytest.raises(JointOutOfRange):
        forward_kinematics(chain, q)


def test_fk_respects_base_pose():
    base = Pose(np.array([0.1, -0.2, 0.5]),
                np.array([math.cos(0.3), 0.0, 0.0, math.sin(0.3)]))
    chain = psm_chain(base_pose=base)
    q = np.array([0.2, 0.1, 0.15, 0.0, -0.3, 0.2])
    got = forward_kinematics(chain, q)
    expected = base.to_matrix() @ oracle_psm_tip(q)
    assert np.allclose(got.position, expected[:3, 3], atol=1e-12)
    assert np.allclose(got.to_matrix()[:3, :3], expected[:3, :3], atol=1e-12)


# --- RCM and shaft properties -------------------------------------------------

def test_rcm_shaft_line_passes_through_pivot():
    chain = psm_chain()
    rng = np.random.default_rng(23)
    for _ in range(500):
        q = chain.random_joints(rng)
        frames = fk_frames(chain, q)
        o3, o4 = frames[3][:3, 3], frames[4][:3, 3]
        assert point_line_distance(np.zeros(3), o3, o4) < 1e-9


def test_prismatic_monotonicity():
    chain = psm_chain()
    rng = np.random.default_rng(5)
    for _ in range(50):
        q = chain.random_joints(rng)
        distances = []
        for q3 in np.linspace(chain.joint_limits[2, 0], chain.joint_limits[2, 1], 25):
            q[2] = q3
            distances.append(np.linalg.norm(forward_kinematics(chain, q).position))
        diffs = np.diff(distances)
        assert np.all(diffs > 0)


# --- inverse kinematics -------------------------------------------------------

def test_ik_psm_round_trip_random():
    chain = psm_chain()
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        q = chain.random_joints(rng)
        target = forward_kinematics(chain, q)
        sol = inverse_kinematics_psm(target, chain, seed=q)
        back = forward_kinematics(chain, sol)
        assert np.linalg.norm(back.position - target.position) < 1e-6
        assert quat_angle(back.orientation, target.orientation) < 1e-6
        chain.validate_joints(sol)


def test_ik_psm_round_trip_without_seed():
    chain = psm_chain()
    rng = np.random.default_rng(77)
    for _ in range(200):
        q = chain.random_joints(rng)
        target = forward_kinematics(chain, q)
        sol = inverse_kinematics_psm(target, chain)
        back = forward_kinematics(chain, sol)
        assert np.linalg.norm(back.position - target.position) < 1e-6
        assert quat_angle(back.orientation, target.orientation) < 1e-6


def test_ik_psm_axis_target_picks_neutral_branch():
    chain = psm_chain()
    q_neutral = np.array([0.0, 0.0, 0.15, 0.0, 0.0, 0.0])
    target = forward_kinematics(chain, q_neutral)
    sol = inverse_kinematics_psm(target, chain, seed=chain.neutral_joints())
    assert abs(sol[0]) < 1e-9 and abs(sol[1]) < 1e-9


def test_ik_psm_far_target_unreachable():
    chain = psm_chain()
    target = Pose(np.array([0.0, 0.0, -1.0]),
                  forward_kinematics(chain, [0, 0, 0.15, 0, 0, 0]).orientation)
    with pytest.raises(Unreachable):
        inverse_kinematics_psm(target, chain)


def test_ik_psm_singular_target_reported():
    chain = psm_chain()
    # tip z-axis deliberately aligned with the position ray (straight down)
    p = np.array([0.0, 0.0, -0.2])
    rot = np.array([[1, 0, 0], [0, -1, 0], [0, 0, -1]], dtype=float)
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = p
    target = Pose.from_matrix(m)
    with pytest.raises(AtSingularity):
        inverse_kinematics_psm(target, chain)


def test_ik_psm_branch_selection_prefers_seed():
    chain = psm_chain()
    rng = np.random.default_rng(9)
    for _ in range(100):
        q = chain.random_joints(rng)
        target = forward_kinematics(chain, q)
        sol = inverse_kinematics_psm(target, chain, seed=q)
        # seeded solve should come back to the generating branch
        assert np.max(np.abs(sol - q)) < 1e-6


def test_ik_ecm_round_trip_random():
    chain = ecm_chain()
    rng = np.random.default_rng(31)
    for _ in range(1000):
        q = chain.random_joints(rng)
        target = forward_kinematics(chain, q)
        sol = inverse_kinematics_ecm(target, chain, seed=q)
        back = forward_kinematics(chain, sol)
        assert np.linalg.norm(back.position - target.position) < 1e-6
        assert quat_angle(back.orientation, target.orientation) < 1e-6


def test_ik_ecm_axis_target_neutral_branch():
    chain = ecm_chain()
    q = np.array([0.0, 0.0, 0.18, 0.0])
    target = forward_kinematics(chain, q)
    sol = inverse_kinematics_ecm(target, chain, seed=chain.neutral_joints())
    assert abs(sol[0]) < 1e-9 and abs(sol[1]) < 1e-9


def test_ik_ecm_full_orientation_unreachable():
    chain = ecm_chain()
    q = np.array([0.1, -0.2, 0.15, 0.4])
    good = forward_kinematics(chain, q)
    # tilt the camera frame off the shaft axis: not realizable with 4 DOF
    tilt = Pose(np.zeros(3), np.array([math.cos(0.1), math.sin(0.1), 0.0, 0.0]))
    bad = Pose(good.position, tilt.compose(good).orientation)
    with pytest.raises(Unreachable):
        inverse_kinematics_ecm(bad, chain)


# --- chain table parsing ------------------------------------------------------

def test_parse_chain_table_matches_builtin():
    chain = psm_chain()
    for row, (a, alpha) in zip(chain.rows, [(0, math.pi / 2), (0, -math.pi / 2),
                                            (0, math.pi / 2), (0, 0),
                                            (0, -math.pi / 2), (L3, -math.pi / 2)]):
        assert row.a_prev == pytest.approx(a)
        assert row.alpha_prev == pytest.approx(alpha)
    kinds = [r.joint_kind for r in chain.rows]
    assert kinds == [JointKind.REVOLUTE, JointKind.REVOLUTE, JointKind.PRISMATIC,
                     JointKind.REVOLUTE, JointKind.REVOLUTE, JointKind.REVOLUTE]
    assert [r.joint_index for r in chain.rows] == [0, 1, 2, 3, 4, 5]


def test_parse_chain_table_from_file(tmp_path):
    from surgisim.kinematics import PSM_TABLE, chain_from_table_file
    path = tmp_path / "psm.chain"
    path.write_text(PSM_TABLE)
    chain = chain_from_table_file(path, name="psm-file")
    ref = psm_chain()
    q = np.array([0.2, -0.1, 0.13, 0.7, 0.3, -0.2])
    assert np.allclose(forward_kinematics(chain, q).position,
                       forward_kinematics(ref, q).position, atol=1e-15)


def test_parse_chain_table_rejects_bad_rows():
    with pytest.raises(ChainTableError):
        parse_chain_table("0.0 pi/2 0.0\n")
    with pytest.raises(ChainTableError):
        parse_chain_table("0.0 pi/2 q1 q2\n")
    with pytest.raises(ChainTableError):
        parse_chain_table("0.0 bogus 0.0 q1\n")


def test_pose_rejects_non_unit_quaternion():
    with pytest.raises(ValueError):
        Pose(np.zeros(3), np.array([1.0, 1.0, 0.0, 0.0]))
