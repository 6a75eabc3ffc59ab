"""Online localization: per-FLS state machines and the run orchestrator.

Each non-root FLS follows its anchor. On a fresh beacon it measures the
relative vector to the anchor, estimates its current offset, and moves by
``desired_offset - estimated_offset`` (clamped by the speed limit). The
estimate is the mean of the last ``filter_window`` measurements, each
shifted by the FLS's own displacement and the anchor's reported
displacement since it was taken; with one sample (or zero noise) it is
exactly the latest measurement.

Two execution modes share :func:`fls_step`:

* ``deterministic`` - single-threaded loop on simulated time, FLSs stepped in
  id order each tick over the seeded in-memory bus; byte-reproducible.
* ``wallclock`` - one thread per FLS on real time, over the bus or UDP.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from ._validation import check_probability
from .exceptions import InputError, InvalidDuration, OutputDirError
from .planner import FlsAssignment, Plan, load_plan, plan_to_json
from .protocol import (ORCHESTRATOR_ID, Message, MessageBus, MessageKind, SimClock,
                       Transport, UdpTransport, WallClock)
from .sensor import DeploymentModel, SensorModel, dead_reckon, measure_relative

logger = logging.getLogger(__name__)

KIND_NAMES = {
    MessageKind.ANCHOR_BEACON: "AnchorBeacon",
    MessageKind.LOCATION_UPDATE: "LocationUpdate",
    MessageKind.CORRECTION: "Correction",
    MessageKind.TERMINATE: "Terminate",
}
KIND_BY_NAME = {v: k for k, v in KIND_NAMES.items()}

# Mixed into the experiment seed for the bus's own stream.
_BUS_STREAM = 0x5EED_B05


class Policy(str, enum.Enum):
    CASCADE = "cascade"
    CONTINUOUS = "continuous"


class Mode(str, enum.Enum):
    DETERMINISTIC = "deterministic"
    WALLCLOCK = "wallclock"


@dataclass
class ExperimentConfig:
    plan_path: str | None = None
    duration_s: float = 60.0
    tick_interval_ms: float = 100.0
    max_speed: float = 1.0
    policy: Policy = Policy.CONTINUOUS
    filter_window: int = 20
    # (x, y, z) in meters, or None for a point ``dispatcher_below`` meters
    # under the centroid of the bright ground truth.
    dispatcher: tuple[float, float, float] | None = None
    dispatcher_below: float = 10.0
    alpha: float = 10.0
    sensor: SensorModel = field(default_factory=SensorModel)
    mode: Mode = Mode.DETERMINISTIC
    transport: str = "bus"
    latency_us: tuple[int, int] = (0, 0)
    drop_probability: float = 0.0
    net_port: int = 47474
    net_broadcast_addr: str | None = None
    net_bind_addr: str = ""
    seed: int = 0
    output_dir: str | None = None

    def __post_init__(self):
        try:
            self.policy = Policy(self.policy)
            self.mode = Mode(self.mode)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        if not self.duration_s > 0 or not math.isfinite(self.duration_s):
            raise InvalidDuration(f"duration_s must be > 0, got {self.duration_s}")
        if not self.tick_interval_ms > 0:
            raise InputError(f"tick_interval_ms must be > 0, got {self.tick_interval_ms}")
        if not self.max_speed > 0:
            raise InputError(f"max_speed must be > 0, got {self.max_speed}")
        if int(self.filter_window) < 1:
            raise InputError(f"filter_window must be >= 1, got {self.filter_window}")
        if self.transport not in ("bus", "udp"):
            raise InputError(f"transport must be 'bus' or 'udp', got {self.transport!r}")
        if self.transport == "udp" and self.mode is Mode.DETERMINISTIC:
            raise InputError("UDP transport is only available in wallclock mode")
        if self.alpha < 0:
            raise InputError(f"alpha must be >= 0, got {self.alpha}")
        check_probability(self.drop_probability, "drop_probability")

    @property
    def tick_us(self) -> int:
        return int(round(self.tick_interval_ms * 1000))

    @property
    def n_ticks(self) -> int:
        return int(math.floor(self.duration_s * 1e6 / self.tick_us + 1e-9))

    @property
    def max_step(self) -> float:
        return self.max_speed * self.tick_us / 1e6

    def echo(self) -> dict:
        """JSON-safe copy of the configuration (without the output directory)."""
        d = {}
        for f in fields(self):
            if f.name == "output_dir":
                continue
            v = getattr(self, f.name)
            if isinstance(v, enum.Enum):
                v = v.value
            elif isinstance(v, SensorModel):
                v = asdict(v)
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
        return d


class World:
    """Actual FLS positions; the emulation's source of truth for sensing."""

    def __init__(self, positions: dict[int, np.ndarray], threadsafe=False):
        self._pos = {k: np.array(v, dtype=np.float64) for k, v in positions.items()}
        self._lock = threading.Lock() if threadsafe else None

    def position(self, fls_id: int) -> np.ndarray:
        if self._lock is None:
            return self._pos[fls_id]
        with self._lock:
            return self._pos[fls_id].copy()

    def move(self, fls_id: int, pos: np.ndarray) -> None:
        if self._lock is None:
            self._pos[fls_id] = pos
        else:
            with self._lock:
                self._pos[fls_id] = pos.copy()

    def snapshot(self) -> dict[int, np.ndarray]:
        return {k: v.copy() for k, v in self._pos.items()}


@dataclass
class FlsState:
    assignment: FlsAssignment
    position: np.ndarray
    rng: np.random.Generator
    desired_rel: np.ndarray | None
    localized: bool = False
    anchor_last_seen: tuple[np.ndarray, int] | None = None
    fresh: bool = False
    terminated: bool = False
    samples: deque = field(default_factory=lambda: deque(maxlen=10))

    @property
    def fls_id(self) -> int:
        return self.assignment.fls_id

    @property
    def is_root(self) -> bool:
        return self.assignment.anchor_id is None


def _beacon(state: FlsState, now_us: int) -> Message:
    flag = 1.0 if state.localized else 0.0
    return Message(MessageKind.ANCHOR_BEACON, state.fls_id, state.assignment.swarm_id, now_us,
                   (tuple(state.position), (flag, 0.0, 0.0)))


def fls_step(state: FlsState, inbox, now_us: int, sensor: SensorModel, world,
             policy: Policy = Policy.CONTINUOUS, max_step: float = math.inf):
    """Advance one FLS by one tick.

    ``inbox`` holds ``(Message, arrival_us)`` pairs. Returns the new position
    and the messages to broadcast. ``state`` is updated in place.
    """
    anchor = state.assignment.anchor_id
    for msg, _ in inbox:
        if msg.kind is MessageKind.TERMINATE:
            state.terminated = True
        elif msg.kind is MessageKind.ANCHOR_BEACON and msg.sender_id == anchor:
            anchor_localized = len(msg.vectors) > 1 and msg.vectors[1][0] > 0.5
            if policy is Policy.CASCADE and not anchor_localized:
                continue
            state.anchor_last_seen = (np.array(msg.vectors[0]), msg.timestamp_us)
            state.fresh = True

    outbox = []
    if anchor is not None and state.fresh:
        state.fresh = False
        true_rel = state.position - world.position(anchor)
        measured = measure_relative(true_rel, sensor, state.rng)
        if measured is not None:
            reported = state.anchor_last_seen[0]
            state.samples.append(measured - state.position + reported)
            estimate = np.mean(state.samples, axis=0) + state.position - reported
            delta = state.desired_rel - estimate
            norm = math.sqrt(float(delta @ delta))
            if norm > max_step:
                delta = delta * (max_step / norm)
            state.localized = True
            if norm > 0.0:
                state.position = state.position + delta
                outbox.append(Message(MessageKind.LOCATION_UPDATE, state.fls_id,
                                      state.assignment.swarm_id, now_us,
                                      (tuple(state.position), tuple(delta))))
    outbox.append(_beacon(state, now_us))
    return state.position, outbox


# ---------------------------------------------------------------------------
# Logs


@dataclass
class MessageRecord:
    t_us: int
    direction: str  # "sent" | "recv"
    kind: str
    peer: int
    nbytes: int
    msg_t_us: int  # sender's timestamp; pairs receives with sends


@dataclass
class RunLogs:
    trajectories: dict[int, list[tuple[int, float, float, float]]]
    messages: dict[int, list[MessageRecord]]
    manifest: dict

    def trajectory(self, fls_id: int) -> tuple[np.ndarray, np.ndarray]:
        """``(t_us, xyz)`` arrays for one FLS."""
        rows = self.trajectories[fls_id]
        t = np.array([r[0] for r in rows], dtype=np.int64)
        xyz = np.array([r[1:] for r in rows], dtype=np.float64).reshape(-1, 3)
        return t, xyz

    def final_positions(self) -> dict[int, np.ndarray]:
        return {i: np.array(rows[-1][1:]) for i, rows in self.trajectories.items() if rows}

    def write(self, outdir) -> None:
        try:
            os.makedirs(os.path.join(outdir, "trajectory"), exist_ok=True)
            os.makedirs(os.path.join(outdir, "messages"), exist_ok=True)
        except OSError as exc:
            raise OutputDirError(f"cannot create output directory {outdir}: {exc}") from exc
        for fid in sorted(self.trajectories):
            write_trajectory_csv(trajectory_path(outdir, fid), self.trajectories[fid])
        for fid in sorted(self.messages):
            write_message_csv(message_path(outdir, fid), self.messages[fid])
        with open(os.path.join(outdir, "manifest.json"), "w") as fh:
            json.dump(self.manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read(cls, outdir, with_messages=True) -> "RunLogs":
        from .exceptions import IncompleteRun

        mpath = os.path.join(outdir, "manifest.json")
        if not os.path.exists(mpath):
            raise IncompleteRun(f"{outdir}: no manifest.json (run not complete)")
        with open(mpath) as fh:
            manifest = json.load(fh)
        traj, msgs = {}, {}
        for fid in manifest["fls_ids"]:
            p = trajectory_path(outdir, fid)
            if os.path.exists(p):
                traj[fid] = read_trajectory_csv(p)
            if with_messages:
                p = message_path(outdir, fid)
                if os.path.exists(p):
                    msgs[fid] = read_message_csv(p)
        return cls(traj, msgs, manifest)


def trajectory_path(outdir, fid) -> str:
    return os.path.join(outdir, "trajectory", f"fls_{fid:05d}.csv")


def message_path(outdir, fid) -> str:
    return os.path.join(outdir, "messages", f"fls_{fid:05d}.csv")


def _fmt_t(t_us: int) -> str:
    return f"{t_us // 1_000_000}.{t_us % 1_000_000:06d}"


def _parse_t(s: str) -> int:
    whole, _, frac = s.partition(".")
    return int(whole) * 1_000_000 + int((frac + "000000")[:6])


def write_trajectory_csv(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("t,x,y,z\n")
        for t, x, y, z in rows:
            fh.write(f"{_fmt_t(t)},{x!r},{y!r},{z!r}\n")


def read_trajectory_csv(path) -> list[tuple[int, float, float, float]]:
    out = []
    with open(path) as fh:
        fh.readline()
        for line in fh:
            t, x, y, z = line.rstrip("\n").split(",")
            out.append((_parse_t(t), float(x), float(y), float(z)))
    return out


def write_message_csv(path, records) -> None:
    with open(path, "w") as fh:
        fh.write("t,dir,kind,peer,bytes\n")
        for r in records:
            fh.write(f"{_fmt_t(r.t_us)},{r.direction},{r.kind},{r.peer},{r.nbytes}\n")


def read_message_csv(path) -> list[MessageRecord]:
    """Parse a message log; raises ``ValueError`` on any corrupt record."""
    out = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "t,dir,kind,peer,bytes":
            raise ValueError(f"{path}: bad header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(",")
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields")
            t, d, kind, peer, nbytes = parts
            if d not in ("sent", "recv") or kind not in KIND_BY_NAME:
                raise ValueError(f"{path}:{lineno}: bad direction or kind")
            out.append(MessageRecord(_parse_t(t), d, kind, int(peer), int(nbytes), -1))
    return out


# ---------------------------------------------------------------------------
# Orchestration


@dataclass
class Experiment:
    """Initial world state produced by :func:`init_experiment`."""

    config: ExperimentConfig
    plan: Plan
    states: dict[int, FlsState]
    dispatcher: np.ndarray

    @property
    def initial_positions(self) -> dict[int, np.ndarray]:
        return {i: s.position.copy() for i, s in self.states.items()}


def resolve_dispatcher(config: ExperimentConfig, plan: Plan) -> np.ndarray:
    if config.dispatcher is not None:
        return np.asarray(config.dispatcher, dtype=np.float64)
    centroid = plan.ground_truth([a.fls_id for a in plan.bright]).mean(axis=0)
    return centroid - np.array([0.0, 0.0, config.dispatcher_below])


def init_experiment(config: ExperimentConfig, plan: Plan | None = None) -> Experiment:
    """Deploy every FLS by dead reckoning and build its protocol state.

    Roots are placed on their ground truth and start localized; they are the
    fixed reference the rest of the formation localizes against.
    """
    if plan is None:
        if config.plan_path is None:
            raise InputError("config has no plan_path")
        plan = load_plan(config.plan_path)
    dispatcher = resolve_dispatcher(config, plan)
    dep = DeploymentModel(tuple(dispatcher), config.alpha)
    by_id = {a.fls_id: a for a in plan.assignments}
    states = {}
    for a in plan.assignments:
        rng = np.random.default_rng(config.seed ^ a.fls_id)
        gt = np.array(a.ground_truth_location)
        if a.anchor_id is None:
            pos, desired = gt.copy(), None
        else:
            pos = dead_reckon(gt, dep, rng)
            desired = gt - np.array(by_id[a.anchor_id].ground_truth_location)
        states[a.fls_id] = FlsState(
            assignment=a, position=pos, rng=rng, desired_rel=desired,
            localized=a.anchor_id is None,
            samples=deque(maxlen=int(config.filter_window)))
    return Experiment(config, plan, states, dispatcher)


def _relevant(a: FlsAssignment) -> set[int]:
    rel = set(a.children_ids)
    if a.anchor_id is not None:
        rel.add(a.anchor_id)
    return rel


def _log_recv(records, inbox):
    for msg, arrival in inbox:
        records.append(MessageRecord(arrival, "recv", KIND_NAMES[msg.kind], msg.sender_id,
                                     19 + 24 * len(msg.vectors), msg.timestamp_us))


def _manifest(config, plan, counters, status="ok", failures=(), wall_time=None) -> dict:
    m = {
        "status": status,
        "mode": config.mode.value,
        "config": config.echo(),
        "fls_ids": plan.fls_ids,
        "bright_ids": [a.fls_id for a in plan.bright],
        "dark_ids": [a.fls_id for a in plan.dark],
        "root_ids": plan.roots,
        "n_ticks": config.n_ticks,
        "counters": counters,
        "failures": list(failures),
    }
    # Wall time only in wallclock mode: deterministic output stays byte-identical.
    if wall_time is not None:
        m["wall_time_s"] = wall_time
    return m


def run_deterministic(exp: Experiment) -> RunLogs:
    config, plan, states = exp.config, exp.plan, exp.states
    clock = SimClock(0)
    bus = MessageBus(config.latency_us, config.drop_probability,
                     seed=np.random.SeedSequence([config.seed, _BUS_STREAM]), clock=clock)
    ids = sorted(states)
    endpoints = {i: bus.attach(i, accept=_relevant(states[i].assignment)) for i in ids}
    orchestrator = bus.attach(ORCHESTRATOR_ID, accept=())
    world = World({i: s.position for i, s in states.items()})
    traj = {i: [(0, *states[i].position.tolist())] for i in ids}
    msgs: dict[int, list[MessageRecord]] = {i: [] for i in ids}
    tick_us, n_ticks, max_step = config.tick_us, config.n_ticks, config.max_step
    moves = 0

    for k in range(1, n_ticks + 1):
        now = k * tick_us
        clock.now_us = now
        if k == n_ticks:
            orchestrator.broadcast(Message(MessageKind.TERMINATE, ORCHESTRATOR_ID, 0, now))
        for i in ids:
            st = states[i]
            if st.terminated:
                continue
            inbox = endpoints[i].drain()
            _log_recv(msgs[i], inbox)
            before = st.position
            pos, outbox = fls_step(st, inbox, now, config.sensor, world, config.policy, max_step)
            if pos is not before:
                world.move(i, pos)
                moves += 1
            for m in outbox:
                nbytes = endpoints[i].broadcast(m)
                msgs[i].append(MessageRecord(now, "sent", KIND_NAMES[m.kind], i, nbytes,
                                             m.timestamp_us))
            traj[i].append((now, *pos.tolist()))

    counters = {"messages_sent": bus.sent, "deliveries": bus.delivered, "drops": bus.dropped,
                "moves": moves,
                "malformed": sum(ep.malformed for ep in endpoints.values())}
    return RunLogs(traj, msgs, _manifest(config, plan, counters))


def _make_transport(config, owner, accept, clock, bus) -> Transport:
    if config.transport == "udp":
        return UdpTransport(owner, config.net_port, config.net_broadcast_addr,
                            config.net_bind_addr, clock=clock, accept=accept)
    return bus.attach(owner, accept=accept)


def run_wallclock(exp: Experiment) -> RunLogs:
    config, plan, states = exp.config, exp.plan, exp.states
    clock = WallClock()
    bus = None
    if config.transport == "bus":
        bus = MessageBus(config.latency_us, config.drop_probability,
                         seed=np.random.SeedSequence([config.seed, _BUS_STREAM]), clock=clock)
    ids = sorted(states)
    transports = {}
    try:
        for i in ids:
            transports[i] = _make_transport(config, i, _relevant(states[i].assignment), clock, bus)
        orchestrator = _make_transport(config, ORCHESTRATOR_ID, (), clock, bus)
    except Exception:
        for t in transports.values():
            t.close()
        raise
    world = World({i: s.position for i, s in states.items()}, threadsafe=True)
    traj = {i: [(0, *states[i].position.tolist())] for i in ids}
    msgs: dict[int, list[MessageRecord]] = {i: [] for i in ids}
    failures: list[dict] = []
    fail_lock = threading.Lock()
    stop = threading.Event()
    tick_us, max_step = config.tick_us, config.max_step
    deadline_us = int(config.duration_s * 1e6)
    start_gate = threading.Barrier(len(ids) + 1)

    def worker(i):
        st, tr = states[i], transports[i]
        try:
            start_gate.wait()
            k = 1
            last = 0
            while not stop.is_set():
                target = k * tick_us
                wait = (target - clock()) / 1e6
                if wait > 0:
                    time.sleep(wait)
                now = clock()
                if now > deadline_us + tick_us or stop.is_set():
                    break
                now = max(now, last + 1)
                last = now
                inbox = tr.drain()
                _log_recv(msgs[i], inbox)
                pos, outbox = fls_step(st, inbox, now, config.sensor, world, config.policy,
                                       max_step)
                world.move(i, pos)
                for m in outbox:
                    nbytes = tr.broadcast(m)
                    msgs[i].append(MessageRecord(now, "sent", KIND_NAMES[m.kind], i, nbytes,
                                                 m.timestamp_us))
                traj[i].append((now, *pos.tolist()))
                if st.terminated:
                    break
                # Skip ticks we are already late for rather than bursting.
                k = max(k + 1, clock() // tick_us + 1)
        except Exception as exc:  # recorded in the manifest, never fatal to the run
            logger.exception("fls %s failed", i)
            with fail_lock:
                failures.append({"fls_id": i, "error": repr(exc)})

    threads = [threading.Thread(target=worker, args=(i,), name=f"fls-{i}", daemon=True)
               for i in ids]
    t0 = time.perf_counter()
    for th in threads:
        th.start()
    clock.restart()
    start_gate.wait()
    time.sleep(max(0.0, (deadline_us - clock()) / 1e6))
    orchestrator.broadcast(Message(MessageKind.TERMINATE, ORCHESTRATOR_ID, 0, clock()))
    hard_deadline = time.perf_counter() + max(2.0, 5 * tick_us / 1e6)
    for th in threads:
        th.join(timeout=max(0.0, hard_deadline - time.perf_counter()))
    stop.set()
    for th in threads:
        th.join(timeout=1.0)
    wall = time.perf_counter() - t0
    hung = [th.name for th in threads if th.is_alive()]
    for h in hung:
        failures.append({"fls_id": int(h.split("-")[1]), "error": "did not stop"})

    counters = {"malformed": sum(t.malformed for t in transports.values())}
    if bus is not None:
        counters.update(messages_sent=bus.sent, deliveries=bus.delivered, drops=bus.dropped)
    for t in transports.values():
        t.close()
    orchestrator.close()
    status = "failed" if failures else "ok"
    return RunLogs(traj, msgs, _manifest(config, plan, counters, status, failures, wall))


def run(config: ExperimentConfig, plan: Plan | None = None) -> RunLogs:
    """Execute an experiment and, if ``config.output_dir`` is set, write its logs."""
    exp = init_experiment(config, plan)
    if config.output_dir is not None:
        try:
            os.makedirs(config.output_dir, exist_ok=True)
        except OSError as exc:
            raise OutputDirError(f"cannot create {config.output_dir}: {exc}") from exc
    if config.mode is Mode.DETERMINISTIC:
        logs = run_deterministic(exp)
    else:
        logs = run_wallclock(exp)
    if config.output_dir is not None:
        logs.write(config.output_dir)
        with open(os.path.join(config.output_dir, "plan.json"), "w") as fh:
            fh.write(plan_to_json(exp.plan))
    return logs


def with_overrides(config: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(config, **kw)
