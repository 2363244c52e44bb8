"""Session state machine, channel model, link stats, and the session loop."""

import numpy as np
import pytest

from desktwin.chain import JointState
from desktwin.simcore import SimConfig
from desktwin.store import IncompleteRecord, SessionMeta, read_session, validate
from desktwin.teleop import (
    Channel,
    ChannelModel,
    DataGap,
    GripperClose,
    PedalDiscard,
    PedalSave,
    Phase,
    ScriptedLeader,
    SessionConfig,
    SessionEngine,
    SessionState,
    Tick,
    compute_stats,
    run_session,
    session_transition,
    sync_tick,
)

from conftest import frictionless

CFG = SimConfig()
META = SessionMeta(operator="ana", started_at="2025-06-01T12:00:00Z", robot_id="r0")


# ---- state machine ----

EVENTS = {
    "close_hi": GripperClose(0.9),
    "close_lo": GripperClose(0.5),
    "save": PedalSave(),
    "discard": PedalDiscard(),
    "gap_big": DataGap("leader", 0.12),
    "gap_small": DataGap("leader", 0.05),
    "tick": Tick(),
}

# expected phase for every (phase, event) pair; None means unchanged
TABLE = {
    Phase.IDLE: {"close_hi": Phase.RECORDING},
    Phase.RECORDING: {"save": Phase.SAVED, "discard": Phase.DISCARDED,
                      "gap_big": Phase.ABORTED},
    Phase.SAVED: {},
    Phase.DISCARDED: {},
    Phase.ABORTED: {},
}


@pytest.mark.parametrize("phase", list(Phase))
@pytest.mark.parametrize("name", sorted(EVENTS))
def test_transition_table_exhaustive(phase, name):
    state = SessionState(phase=phase, tick=3)
    new = session_transition(state, EVENTS[name])
    if name == "tick":
        assert new.phase is phase and new.tick == 4
        return
    expected = TABLE[phase].get(name, phase)
    assert new.phase is expected
    assert new.tick == 3


def test_transition_threshold_is_configurable():
    state = SessionState(phase=Phase.IDLE)
    cfg = SessionConfig(close_threshold=0.4)
    assert session_transition(state, GripperClose(0.5), cfg).phase is Phase.RECORDING


def test_no_terminal_without_recording():
    # from Idle, no single event reaches a terminal phase
    for ev in EVENTS.values():
        assert session_transition(SessionState(), ev).phase in (Phase.IDLE,
                                                                Phase.RECORDING)


# ---- channel ----

def test_ideal_channel_one_tick_offset():
    ch = Channel(ChannelModel(delay=0.0, jitter=0.0, drop_prob=0.0, seed=1))
    applied = []
    for t in range(10):
        cmd = sync_tick(np.array([float(t)]), 0.0, ch, t * 0.02)
        applied.append(None if cmd is None else cmd[0][0])
    assert applied[0] is None
    assert applied[1:] == [float(t) for t in range(9)]


def test_full_drop_never_updates():
    ch = Channel(ChannelModel(delay=0.0, jitter=0.0, drop_prob=1.0, seed=1))
    for t in range(50):
        assert sync_tick(np.zeros(1), 0.0, ch, t * 0.02) is None


def test_channel_latency_statistics():
    ch = Channel(ChannelModel(delay=0.010, jitter=0.002, drop_prob=0.0, seed=3))
    for t in range(1000):
        sync_tick(np.zeros(1), 0.0, ch, t * 0.02)
    lat = np.array([d - s for s, d in ch.deliveries])
    assert abs(lat.mean() - 0.010) < 2e-4
    assert np.all(lat >= 0.008 - 1e-12) and np.all(lat <= 0.012 + 1e-12)


def test_channel_reordered_deliveries_dropped_as_stale():
    # jitter larger than delay forces occasional reordering
    ch = Channel(ChannelModel(delay=0.010, jitter=0.009, drop_prob=0.0, seed=5))
    applied = []
    for t in range(400):
        cmd = sync_tick(np.array([float(t)]), 0.0, ch, t * 0.02)
        if cmd is not None:
            applied.append(cmd[0][0])
    assert len(applied) > 300
    assert all(a < b for a, b in zip(applied, applied[1:]))


def test_channel_model_validation():
    with pytest.raises(Exception):
        ChannelModel(delay=-1.0)
    with pytest.raises(Exception):
        ChannelModel(drop_prob=1.5)


# ---- stats ----

def test_stats_all_on_time():
    deliveries = [(t * 0.02, t * 0.02 + 0.01) for t in range(500)]
    s = compute_stats(deliveries, window=5.0, t_now=500 * 0.02)
    assert s.availability == 1.0
    assert s.mean_latency_ms == pytest.approx(10.0)
    assert s.p95_latency_ms == pytest.approx(10.0)


def test_stats_half_dropped():
    ch = Channel(ChannelModel(delay=0.0, jitter=0.0, drop_prob=0.5, seed=11))
    for t in range(2000):
        sync_tick(np.zeros(1), 0.0, ch, t * 0.02)
    s = compute_stats(ch.deliveries, window=2000 * 0.02, t_now=2000 * 0.02)
    assert s.availability == pytest.approx(0.5, abs=0.05)


def test_stats_empty_window():
    s = compute_stats([], window=1.0, t_now=10.0)
    assert s.availability == 0.0
    assert s.mean_latency_ms is None and s.p95_latency_ms is None


def test_stats_p95_at_least_mean_for_channel_samples():
    ch = Channel(ChannelModel(delay=0.01, jitter=0.004, drop_prob=0.1, seed=2))
    for t in range(500):
        sync_tick(np.zeros(1), 0.0, ch, t * 0.02)
    s = compute_stats(ch.deliveries, window=10.0, t_now=10.0)
    assert s.p95_latency_ms >= s.mean_latency_ms


# ---- session loop ----

def scripted(model, n_ticks=500, amplitude=0.2, events=None, silence=None,
             gripper=0.9 * 0.08, total=None):
    t = np.arange(n_ticks) * CFG.control_dt
    base = np.array([0.0, 0.6, 0.2, 0.0, 0.3, 0.0])
    q = base[None, :] + amplitude * np.sin(2 * np.pi * 0.3 * t)[:, None] \
        * np.array([1.0, 0.5, 0.5, 1.0, 0.5, 1.0])[None, :]
    return ScriptedLeader(q=q, gripper=gripper, events=events or {},
                          silence=silence, n_ticks=total or (n_ticks + 1))


def ideal_channel(seed=0):
    return Channel(ChannelModel(delay=0.0, jitter=0.0, drop_prob=0.0, seed=seed))


def test_scripted_session_saved_with_500_ticks(model, actuation):
    leader = scripted(model, 500, events={500: [PedalSave()]})
    rec = run_session(model, actuation, leader, ideal_channel(), meta=META)
    assert rec.footer.status == "saved"
    assert rec.footer.tick_count == 500
    assert len(rec.ticks) == 500
    assert validate(rec).passed


def test_session_records_from_gripper_close(model, actuation):
    # gripper opens below threshold for 100 ticks, then closes
    grip = np.concatenate([np.full(100, 0.0), np.full(400, 0.9 * 0.08)])
    leader = scripted(model, 500, gripper=grip, events={500: [PedalDiscard()]})
    rec = run_session(model, actuation, leader, ideal_channel(), meta=META)
    assert rec.footer.status == "discarded"
    assert rec.footer.tick_count == 400  # recording started at tick 100


def test_silenced_leader_aborts_with_gap(model, actuation):
    leader = scripted(model, 1000, silence=(200, 1000))
    rec = run_session(model, actuation, leader, ideal_channel(), meta=META)
    assert rec.footer.status == "aborted"
    assert rec.footer.gap_events[0].stream == "leader"
    assert rec.footer.gap_events[0].gap_s > 0.1
    # ~200 ticks plus the 5-tick gap window, worst case one extra tick
    assert 200 <= rec.footer.tick_count <= 206


def test_session_determinism(model, actuation):
    def go():
        leader = scripted(model, 300, events={300: [PedalSave()]})
        ch = Channel(ChannelModel(delay=0.01, jitter=0.004, drop_prob=0.1, seed=9))
        return run_session(model, actuation, leader, ch, meta=META)

    assert go() == go()


def test_follower_tracks_constant_pose_within_gravity_over_kp(model, actuation):
    from desktwin import chain

    act = frictionless(actuation)
    pose = np.array([0.2, 0.7, 0.3, 0.1, 0.4, 0.1])
    leader = ScriptedLeader(q=np.tile(pose, (400, 1)), gripper=0.9 * 0.08,
                            events={400: [PedalSave()]}, n_ticks=401)
    rec = run_session(model, act, leader, ideal_channel(), meta=META)
    final = np.array(rec.ticks[-1].follower_q)
    err = np.abs(pose - final)
    bound = np.abs(chain.gravity_torques(model, final)) / act.arrays()[0]
    assert np.all(err <= bound * 1.05 + 1e-4)


def test_tracking_lag_is_one_tick_under_10ms_delay(model, actuation):
    leader = scripted(model, 600, amplitude=0.3, events={600: [PedalSave()]})
    ch = Channel(ChannelModel(delay=0.010, jitter=0.0, drop_prob=0.0, seed=0))
    rec = run_session(model, actuation, leader, ch, meta=META)
    lead = np.array([t.leader_q[0] for t in rec.ticks])
    tgt = np.array([t.q_target[0] for t in rec.ticks])
    cors = [np.corrcoef(lead[50:-10], tgt[50 + k:len(tgt) - 10 + k])[0, 1]
            for k in range(6)]
    assert int(np.argmax(cors)) == 1


def test_abort_within_one_tick_of_gap(model, actuation):
    gap_ticks = 5  # 0.1 s at 50Hz
    for start in (150, 300):
        leader = scripted(model, 1000, silence=(start, 1000))
        rec = run_session(model, actuation, leader, ideal_channel(), meta=META)
        assert rec.footer.status == "aborted"
        assert abs(rec.footer.gap_events[0].at_tick - (start + gap_ticks)) <= 1


def test_writer_failure_aborts_session(model, actuation, tmp_path):
    from desktwin.store import SessionWriter, default_streams

    class FlakyWriter(SessionWriter):
        def __init__(self, *a, **kw):
            super().__init__(*a, **kw)
            self.n = 0

        def append_tick(self, tick):
            self.n += 1
            if self.n > 50:
                raise OSError("disk full")
            super().append_tick(tick)

    w = FlakyWriter(tmp_path / "f.session.jsonl", META, default_streams(6))
    leader = scripted(model, 500, events={500: [PedalSave()]})
    rec = run_session(model, actuation, leader, ideal_channel(), meta=META, writer=w)
    assert rec.footer.status == "aborted"
    assert "log write failed" in rec.footer.reason


def test_session_file_written_and_validates(model, actuation, tmp_path):
    from desktwin.store import SessionWriter, default_streams

    w = SessionWriter(tmp_path / "ok.session.jsonl", META, default_streams(6))
    leader = scripted(model, 200, events={200: [PedalSave()]})
    rec = run_session(model, actuation, leader, ideal_channel(), meta=META, writer=w)
    on_disk = read_session(tmp_path / "ok.session.jsonl")
    assert not isinstance(on_disk, IncompleteRecord)
    assert on_disk == rec
    assert validate(on_disk).passed


def test_source_exhausted_while_recording_discards(model, actuation):
    leader = scripted(model, 100, total=100)  # no pedal ever arrives
    rec = run_session(model, actuation, leader, ideal_channel(), meta=META)
    assert rec.footer.status == "discarded"
    assert rec.footer.reason == "leader source exhausted"
