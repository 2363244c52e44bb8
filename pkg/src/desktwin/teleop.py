"""Teleoperation loop: session state machine, lossy channel, link statistics.

One session runs on a single logical 50Hz timeline. Every tick the engine
drains external events (pedals), derives gripper-close and data-gap events,
passes the leader sample through the channel model, steps the follower
simulation, and logs while recording. All randomness comes from the
channel's seeded generator, so a session is a pure function of its inputs.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .actuation import ArmActuation, GRIPPER_MOVING_MASS, gripper_force
from .chain import ChainModel, JointState
from .errors import ContractError, ModelFormatError
from .simcore import SimConfig, step
from .store import (
    GapEvent,
    IncompleteRecord,
    SessionMeta,
    SessionRecord,
    SessionWriter,
    StreamSpec,
    TickEntry,
    Footer,
    default_streams,
)

__all__ = [
    "Phase", "SessionConfig", "SessionState", "SessionMeta",
    "GripperClose", "PedalSave", "PedalDiscard", "DataGap", "Tick",
    "session_transition", "ChannelModel", "Channel", "sync_tick",
    "LinkStats", "compute_stats", "SessionEngine", "ScriptedLeader",
    "run_session",
]


class Phase(str, Enum):
    IDLE = "idle"
    RECORDING = "recording"
    SAVED = "saved"
    DISCARDED = "discarded"
    ABORTED = "aborted"


TERMINAL_PHASES = (Phase.SAVED, Phase.DISCARDED, Phase.ABORTED)


@dataclass(frozen=True)
class SessionConfig:
    close_threshold: float = 0.8  # fraction of gripper stroke that starts a session
    gap_threshold: float = 0.1    # s of stream silence that aborts (5 ticks at 50Hz)


# ---- events ----

@dataclass(frozen=True)
class GripperClose:
    fraction: float


@dataclass(frozen=True)
class PedalSave:
    pass


@dataclass(frozen=True)
class PedalDiscard:
    pass


@dataclass(frozen=True)
class DataGap:
    stream: str
    gap_s: float


@dataclass(frozen=True)
class Tick:
    pass


@dataclass(frozen=True)
class SessionState:
    phase: Phase = Phase.IDLE
    tick: int = 0
    last_rx: tuple = ()   # ((stream, t), ...) kept hashable for frozen state

    def last_rx_dict(self) -> dict:
        return dict(self.last_rx)


def session_transition(state: SessionState, event,
                       config: SessionConfig = SessionConfig()) -> SessionState:
    """Total, deterministic state machine. Unmatched (phase, event) pairs no-op."""
    if isinstance(event, Tick):
        return replace(state, tick=state.tick + 1)
    if state.phase is Phase.IDLE and isinstance(event, GripperClose):
        if event.fraction >= config.close_threshold:
            return replace(state, phase=Phase.RECORDING)
        return state
    if state.phase is Phase.RECORDING:
        if isinstance(event, PedalSave):
            return replace(state, phase=Phase.SAVED)
        if isinstance(event, PedalDiscard):
            return replace(state, phase=Phase.DISCARDED)
        if isinstance(event, DataGap) and event.gap_s > config.gap_threshold:
            return replace(state, phase=Phase.ABORTED)
    return state


# ---- channel ----

@dataclass
class ChannelModel:
    delay: float = 0.010
    jitter: float = 0.002     # uniform half-width
    drop_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.delay < 0 or self.jitter < 0:
            raise ModelFormatError("delay and jitter must be >= 0")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ModelFormatError("drop_prob must be in [0, 1]")


class Channel:
    """Seeded lossy/latent transport with latest-wins stale rejection."""

    def __init__(self, model: ChannelModel):
        self.model = model
        self._rng = np.random.default_rng(model.seed)
        self._queue: list = []   # (t_deliver, seq, t_send, payload)
        self._seq = 0
        self._last_applied_send = -np.inf
        self.deliveries: list[tuple[float, float]] = []  # (t_send, t_deliver)
        self.sent = 0
        self.dropped = 0

    def send(self, t_now: float, payload) -> None:
        self.sent += 1
        if self.model.drop_prob > 0 and self._rng.random() < self.model.drop_prob:
            self.dropped += 1
            return
        jitter = self.model.jitter * self._rng.uniform(-1.0, 1.0) if self.model.jitter else 0.0
        t_deliver = max(t_now, t_now + self.model.delay + jitter)
        heapq.heappush(self._queue, (t_deliver, self._seq, t_now, payload))
        self._seq += 1

    def poll(self, t_now: float):
        """Latest in-order payload due by t_now; stale deliveries are dropped."""
        best = None
        while self._queue and self._queue[0][0] <= t_now:
            t_deliver, _, t_send, payload = heapq.heappop(self._queue)
            if t_send <= self._last_applied_send:
                continue  # reordered: stale
            if best is None or t_send > best[0]:
                best = (t_send, t_deliver, payload)
        if best is None:
            return None
        t_send, t_deliver, payload = best
        self._last_applied_send = t_send
        self.deliveries.append((t_send, t_deliver))
        return payload


def sync_tick(leader_q, gripper_x: float, channel: Channel, clock: float):
    """One 50Hz transport tick: deliver what is due, then enqueue the new
    leader sample. With an ideal channel the follower sees exactly one tick
    of transport offset."""
    cmd = channel.poll(clock)
    channel.send(clock, (np.asarray(leader_q, dtype=float).copy(), float(gripper_x)))
    return cmd


# ---- link statistics ----

@dataclass
class LinkStats:
    window: float
    mean_latency_ms: float | None
    p95_latency_ms: float | None
    availability: float

    def to_dict(self) -> dict:
        return {"window_s": self.window, "mean_latency_ms": self.mean_latency_ms,
                "p95_latency_ms": self.p95_latency_ms,
                "availability": self.availability}


def compute_stats(deliveries, window: float, t_now: float,
                  rate_hz: float = 50.0) -> LinkStats:
    """Availability and latency over (t_now - window, t_now].

    deliveries: iterable of (t_send, t_deliver) pairs for received samples.
    """
    if window <= 0:
        raise ContractError("window must be > 0")
    received = [(s, d) for s, d in deliveries if t_now - window < d <= t_now]
    expected = max(1, round(min(window, max(t_now, 1.0 / rate_hz)) * rate_hz))
    availability = min(1.0, len(received) / expected)
    if not received:
        return LinkStats(window=window, mean_latency_ms=None,
                         p95_latency_ms=None, availability=0.0)
    lat = np.array([d - s for s, d in received]) * 1e3
    return LinkStats(window=window,
                     mean_latency_ms=float(np.mean(lat)),
                     p95_latency_ms=float(np.percentile(lat, 95)),
                     availability=availability)


# ---- session engine ----

class SessionEngine:
    """Tick-driven core shared by scripted replay and the live server."""

    def __init__(self, model: ChainModel, actuation: ArmActuation,
                 channel: Channel, comp=None,
                 cfg: SimConfig = SimConfig(),
                 session: SessionConfig = SessionConfig(),
                 meta: SessionMeta | None = None,
                 writer: SessionWriter | None = None,
                 initial: JointState | None = None,
                 streams: tuple[str, ...] = ("leader",)):
        if cfg.rate_hz != 50.0:
            raise ContractError("teleop sessions run at 50Hz")
        self.model = model
        self.actuation = actuation
        self.channel = channel
        self.comp = comp
        self.cfg = cfg
        self.session = session
        self.meta = meta or SessionMeta(operator="operator",
                                        started_at="1970-01-01T00:00:00Z",
                                        robot_id="sim0")
        self.writer = writer
        self.state = SessionState()
        self.monitored_streams = streams
        n = model.n_joints
        self.follower = initial or JointState.zeros(n)
        self.q_target = self.follower.q.copy()
        self.gripper_x = 0.0
        self.gripper_xd = 0.0
        self.gripper_target = 0.0
        self.leader_q = self.follower.q.copy()
        self.leader_gripper = 0.0
        self.latency_ms: float | None = None
        self.ticks: list[TickEntry] = []
        self.gap_events: list[GapEvent] = []
        self.footer: Footer | None = None
        self.write_failure: str | None = None
        self._last_rx = {s: 0.0 for s in streams}

    @property
    def phase(self) -> Phase:
        return self.state.phase

    @property
    def t_now(self) -> float:
        return self.state.tick * self.cfg.control_dt

    def stats(self, window: float = 5.0) -> LinkStats:
        return compute_stats(self.channel.deliveries, window, self.t_now,
                             self.cfg.rate_hz)

    def _apply(self, event) -> None:
        new = session_transition(self.state, event, self.session)
        if new.phase is not self.state.phase and new.phase is Phase.ABORTED:
            if isinstance(event, DataGap):
                self.gap_events.append(GapEvent(stream=event.stream,
                                                at_tick=self.state.tick,
                                                gap_s=event.gap_s))
        self.state = new

    def _step_sim(self) -> None:
        self.follower = step(self.model, self.actuation, self.follower,
                             self.q_target, self.cfg, comp=self.comp)
        # gripper: linear servo on the shared finger coordinate
        g = self.actuation.gripper
        dt = self.cfg.inner_dt
        for _ in range(self.cfg.n_substeps):
            f = gripper_force(g, self.gripper_x, self.gripper_xd, self.gripper_target)
            self.gripper_xd += f / GRIPPER_MOVING_MASS * dt
            self.gripper_x += self.gripper_xd * dt
            if self.gripper_x < 0.0:
                self.gripper_x = 0.0
                self.gripper_xd = 0.0
            elif self.gripper_x > g.stroke:
                self.gripper_x = g.stroke
                self.gripper_xd = 0.0

    def _log_tick(self) -> bool:
        entry = TickEntry(
            tick_index=len(self.ticks),
            t=len(self.ticks) / self.cfg.rate_hz,
            leader_q=[float(v) for v in self.leader_q],
            follower_q=[float(v) for v in self.follower.q],
            follower_qd=[float(v) for v in self.follower.qd],
            q_target=[float(v) for v in self.q_target],
            gripper=float(self.gripper_x),
            latency_ms=self.latency_ms,
        )
        self.ticks.append(entry)
        if self.writer is not None:
            try:
                self.writer.append_tick(entry)
            except OSError as e:
                self.write_failure = f"log write failed: {e}"
                return False
        return True

    def tick(self, leader_sample, events=()) -> Phase:
        """Process one 50Hz tick.

        leader_sample: (q, gripper_x) or None when the leader stream is silent.
        events: externally queued pedal/gripper events, already ordered.
        Returns the phase after the tick.
        """
        t = self.t_now
        received = {s: False for s in self.monitored_streams}
        if leader_sample is not None:
            q, grip = leader_sample
            self.leader_q = np.asarray(q, dtype=float).copy()
            self.leader_gripper = float(grip)
            received["leader"] = True
        for s, got in received.items():
            if got:
                self._last_rx[s] = t

        for ev in events:
            if isinstance(ev, DataGap) and ev.stream in self._last_rx:
                # externally reported liveness (e.g. operator link)
                self._last_rx[ev.stream] = min(self._last_rx[ev.stream], t - ev.gap_s)
            else:
                self._apply(ev)

        if leader_sample is not None:
            stroke = self.actuation.gripper.stroke
            self._apply(GripperClose(fraction=self.leader_gripper / stroke))

        if self.state.phase is Phase.RECORDING:
            for s in self.monitored_streams:
                gap = t - self._last_rx[s]
                if gap > self.session.gap_threshold:
                    self._apply(DataGap(stream=s, gap_s=gap))
                    break

        if self.state.phase in TERMINAL_PHASES:
            self.finalize()
            return self.state.phase

        # transport: deliver due samples, enqueue the current one
        if leader_sample is not None:
            cmd = sync_tick(self.leader_q, self.leader_gripper, self.channel, t)
        else:
            cmd = self.channel.poll(t)
        if cmd is not None:
            q_cmd, grip_cmd = cmd
            pk = self.model.packed()
            self.q_target = np.clip(q_cmd, pk.lo, pk.hi)
            self.gripper_target = min(max(grip_cmd, 0.0), self.actuation.gripper.stroke)
            if self.channel.deliveries:
                s, d = self.channel.deliveries[-1]
                self.latency_ms = (d - s) * 1e3

        if self.state.phase is Phase.RECORDING:
            if not self._log_tick():
                self._apply(DataGap(stream="log", gap_s=float("inf")))
                self.state = replace(self.state, phase=Phase.ABORTED)
                self.finalize(reason=self.write_failure)
                return self.state.phase
        self._step_sim()
        self._apply(Tick())
        return self.state.phase

    def finalize(self, reason: str | None = None) -> None:
        if self.footer is not None:
            return
        status = {Phase.SAVED: "saved", Phase.DISCARDED: "discarded",
                  Phase.ABORTED: "aborted"}.get(self.state.phase, "discarded")
        self.footer = Footer(status=status, tick_count=len(self.ticks),
                             gap_events=list(self.gap_events), reason=reason)
        if self.writer is not None:
            try:
                self.writer.finalize(status, self.gap_events, reason)
            except OSError:
                pass

    def record(self) -> SessionRecord:
        if self.footer is None:
            raise ContractError("session not finalized")
        return SessionRecord(meta=self.meta, rate_hz=self.cfg.rate_hz,
                             streams=default_streams(self.model.n_joints),
                             ticks=list(self.ticks), footer=self.footer,
                             gap_threshold=self.session.gap_threshold,
                             close_threshold=self.session.close_threshold)


class ScriptedLeader:
    """Leader source replaying a joint trajectory with scheduled events.

    silence windows (tick ranges) simulate sensor dropouts; events is a
    mapping tick -> list of events delivered at that tick.
    """

    def __init__(self, q: np.ndarray, gripper: np.ndarray | float = 0.0,
                 events: dict[int, list] | None = None,
                 silence: tuple[int, int] | None = None,
                 n_ticks: int | None = None):
        self.q = np.asarray(q, dtype=float)
        if np.ndim(gripper) == 0:
            gripper = np.full(len(self.q), float(gripper))
        self.gripper = np.asarray(gripper, dtype=float)
        self.events = events or {}
        self.silence = silence
        self.n_ticks = n_ticks if n_ticks is not None else len(self.q)

    def sample(self, tick: int):
        if tick >= len(self.q):
            return None
        if self.silence and self.silence[0] <= tick < self.silence[1]:
            return None
        return self.q[tick], self.gripper[tick]

    def events_at(self, tick: int) -> list:
        return self.events.get(tick, [])

    def exhausted(self, tick: int) -> bool:
        return tick >= self.n_ticks


def run_session(model: ChainModel, actuation: ArmActuation, leader_source,
                channel: Channel, comp=None,
                cfg: SimConfig = SimConfig(),
                session: SessionConfig = SessionConfig(),
                meta: SessionMeta | None = None,
                writer: SessionWriter | None = None,
                initial: JointState | None = None,
                max_ticks: int = 200_000) -> SessionRecord:
    """Drive the full loop over a scripted leader until the session ends.

    The record is finalized on PedalSave/PedalDiscard/DataGap; if the source
    ends while still recording, the session is discarded with a reason.
    """
    engine = SessionEngine(model, actuation, channel, comp, cfg, session,
                           meta, writer, initial)
    tick = 0
    while tick < max_ticks:
        if leader_source.exhausted(tick):
            if engine.phase in (Phase.IDLE, Phase.RECORDING):
                engine.finalize(reason="leader source exhausted")
            break
        phase = engine.tick(leader_source.sample(tick), leader_source.events_at(tick))
        if phase in TERMINAL_PHASES:
            break
        tick += 1
    if engine.footer is None:
        engine.finalize(reason="tick budget exhausted")
    return engine.record()
