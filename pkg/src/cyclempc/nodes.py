"""Split plant/controller processes talking over UDP.

The plant node paces the loop: one datagram out per cycle, then it
listens until its actuation budget expires.  A reply that matches the
cycle it just measured is applied next cycle; anything else (late,
stale, duplicate, malformed) is dropped and, if nothing valid arrives
in time, the previous actuation is held.  The controller node is purely
reactive and replies to whatever address the measurement came from, so
only the plant needs the peer address up front.

Both nodes disable the garbage collector inside their loops; a GC pause
is the kind of latency spike the actuation budget exists to absorb, and
these loops allocate little.
"""

from __future__ import annotations

import gc
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .closed_loop import default_initial_actuation
from .controller import ControllerSettings, CycleController
from .network import NetworkWeights
from .ocp import Bounds
from .plant import Actuation, PlantParams, PlantState, plant_step
from . import wire


@dataclass
class NodeConfig:
    """Timing knobs shared by both node loops."""

    period_s: float = 0.080
    budget_s: float = 0.022
    idle_timeout_s: float = 0.2
    idle_limit: int = 25
    spin_margin_s: float = 0.002
    max_runtime_s: float | None = None

    def __post_init__(self):
        if self.period_s <= 0 or self.budget_s <= 0:
            raise ValueError("period_s and budget_s must be positive")
        if self.budget_s >= self.period_s:
            raise ValueError("actuation budget must be shorter than the "
                             "cycle period")
        if self.idle_timeout_s <= 0 or self.idle_limit < 1:
            raise ValueError("idle settings must be positive")


class CycleClock:
    """Fixed-period pacing with a sleep-then-spin wait.

    sleep() alone overshoots by scheduler quanta; spinning the last
    ``spin_margin_s`` keeps wakeup jitter well under the period.
    """

    def __init__(self, period_s: float, spin_margin_s: float = 0.002):
        if period_s <= 0:
            raise ValueError("period_s must be positive")
        self.period_s = period_s
        self.spin_margin_s = spin_margin_s
        self._t0 = None

    def start(self) -> float:
        self._t0 = time.perf_counter()
        return self._t0

    def cycle_start(self, k: int) -> float:
        if self._t0 is None:
            raise RuntimeError("clock not started")
        return self._t0 + k * self.period_s

    def wait_until(self, deadline: float) -> float:
        """Block until ``deadline``; returns the wakeup lateness."""
        while True:
            now = time.perf_counter()
            remaining = deadline - now
            if remaining <= 0:
                return -remaining
            if remaining > self.spin_margin_s:
                time.sleep(remaining - self.spin_margin_s)
            else:
                # spin out the last stretch
                while time.perf_counter() < deadline:
                    pass
                return time.perf_counter() - deadline


@dataclass
class TimingStats:
    n: int
    mean_s: float
    p50_s: float
    p95_s: float
    p99_s: float
    max_s: float

    def summary(self, label: str) -> str:
        return (f"{label}: n={self.n} mean={1e3 * self.mean_s:.3f} "
                f"p50={1e3 * self.p50_s:.3f} p95={1e3 * self.p95_s:.3f} "
                f"p99={1e3 * self.p99_s:.3f} max={1e3 * self.max_s:.3f} ms")


def collect_timing(samples) -> TimingStats:
    arr = np.asarray(list(samples), dtype=float)
    if arr.size == 0:
        return TimingStats(0, 0.0, 0.0, 0.0, 0.0, 0.0)
    return TimingStats(
        n=int(arr.size),
        mean_s=float(arr.mean()),
        p50_s=float(np.percentile(arr, 50)),
        p95_s=float(np.percentile(arr, 95)),
        p99_s=float(np.percentile(arr, 99)),
        max_s=float(arr.max()),
    )


PLANT_NODE_HEADER = (
    "cycle", "r_imep", "r_ca50",
    "imep", "ca50", "nox", "mprr",
    "doi_fuel", "doi_water", "nvo",
    "act_source", "act_status", "deadline_miss",
    "t_res", "y_exceeded", "u_at_bound",
)


@dataclass
class PlantNodeResult:
    rows: list
    latency: TimingStats           # measurement out -> actuation in
    jitter: TimingStats            # cycle start lateness vs nominal
    latency_samples: list
    deadline_misses: int
    stale_frames: int
    dup_frames: int
    decode_errors: int
    heartbeats_seen: int
    clamped_actuations: int
    hit_runtime_guard: bool

    def summary(self) -> str:
        return "\n".join([
            f"cycles run:        {len(self.rows)}",
            f"deadline misses:   {self.deadline_misses}",
            f"stale/dup frames:  {self.stale_frames} / {self.dup_frames}",
            f"decode errors:     {self.decode_errors}",
            f"heartbeats seen:   {self.heartbeats_seen}",
            f"clamped actuations: {self.clamped_actuations}",
            self.latency.summary("actuation latency"),
            self.jitter.summary("pacing jitter"),
        ])


def _open_socket(bind_addr, sock):
    if sock is not None:
        return sock, False
    s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    s.bind(bind_addr)
    return s, True


def plant_node(reference, controller_addr, *, plant_params=None, seed=0,
               initial_actuation=None, bounds=None,
               bind_addr=("127.0.0.1", 0), sock=None,
               config: NodeConfig = None) -> PlantNodeResult:
    """Run the surrogate plant against a remote controller.

    Cycle k: pace to its start, step the plant with the current
    actuation, publish the measurement (+ the reference pair for the
    cycle), then listen for this cycle's actuation until the budget
    runs out.  No valid reply means the previous actuation is held.
    """
    reference = np.asarray(reference, dtype=float)
    if reference.ndim != 2 or reference.shape[1] != 2:
        raise ValueError("reference must be (n_cycles, 2)")
    params = plant_params if plant_params is not None else PlantParams()
    cfg = config if config is not None else NodeConfig()
    u_now = (default_initial_actuation() if initial_actuation is None
             else np.asarray(initial_actuation, dtype=float)).copy()
    bnd = bounds if bounds is not None else Bounds()

    sock, own_sock = _open_socket(bind_addr, sock)
    rng = np.random.default_rng(seed)
    state = PlantState()
    clock = CycleClock(cfg.period_s, cfg.spin_margin_s)
    n = reference.shape[0]
    max_runtime = (cfg.max_runtime_s if cfg.max_runtime_s is not None
                   else cfg.period_s * n * 3.0 + 5.0)

    rows = []
    latency_samples = []
    jitter_samples = []
    misses = 0
    stale = 0
    dups = 0
    decode_errors = 0
    heartbeats = 0
    clamped = 0
    hit_guard = False
    last_seq = -1
    # provenance of u_now, logged on the row that runs with it
    act_source = "init"
    act_status = "init"

    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        t_start = clock.start()
        for k in range(n):
            jitter_samples.append(clock.wait_until(clock.cycle_start(k)))
            if time.perf_counter() - t_start > max_runtime:
                hit_guard = True
                break

            state, y = plant_step(state, Actuation.from_array(u_now),
                                  params, rng)
            r_imep, r_ca50 = reference[k]
            y_arr = y.to_array()
            y_exceeded = int(np.any((y_arr < bnd.y_min) & (bnd.select_y > 0))
                             or np.any((y_arr > bnd.y_max)
                                       & (bnd.select_y > 0)))
            at_bound = int(np.any(np.isclose(u_now, bnd.u_min))
                           or np.any(np.isclose(u_now, bnd.u_max)))

            msg = wire.MeasurementMsg(k, y.imep, y.ca50, y.nox, y.mprr,
                                      r_imep, r_ca50)
            sock.sendto(wire.encode_measurement(k, msg), controller_addr)
            t_sent = time.perf_counter()
            deadline = t_sent + cfg.budget_s

            got = None
            while True:
                remaining = deadline - time.perf_counter()
                if remaining <= 0:
                    break
                sock.settimeout(remaining)
                try:
                    data, _addr = sock.recvfrom(2048)
                except socket.timeout:
                    break
                try:
                    seq, decoded = wire.decode_frame(data)
                except wire.WireError:
                    decode_errors += 1
                    continue
                if isinstance(decoded, wire.HeartbeatMsg):
                    heartbeats += 1
                    continue
                if not isinstance(decoded, wire.ActuationMsg):
                    stale += 1
                    continue
                if seq <= last_seq:
                    dups += 1
                    continue
                last_seq = seq
                if decoded.cycle != k:
                    stale += 1
                    continue
                got = decoded
                latency_samples.append(time.perf_counter() - t_sent)
                break

            deadline_miss = 0
            if got is not None:
                u_next = np.array([got.doi_fuel, got.doi_water, got.nvo])
                clipped = np.clip(u_next, bnd.u_min, bnd.u_max)
                if not np.array_equal(clipped, u_next):
                    clamped += 1   # the controller must never require this
                    u_next = clipped
                next_source = "controller"
                next_status = got.status_name
            else:
                u_next = u_now.copy()
                deadline_miss = 1
                misses += 1
                next_source = "hold"
                next_status = act_status

            rows.append((
                k, r_imep, r_ca50, y.imep, y.ca50, y.nox, y.mprr,
                u_now[0], u_now[1], u_now[2],
                act_source, act_status,
                deadline_miss, state.t_res, y_exceeded, at_bound,
            ))
            u_now = u_next
            act_source = next_source
            act_status = next_status
    finally:
        if own_sock:
            sock.close()
        if gc_was_enabled:
            gc.enable()

    return PlantNodeResult(
        rows=rows,
        latency=collect_timing(latency_samples),
        jitter=collect_timing(jitter_samples),
        latency_samples=latency_samples,
        deadline_misses=misses,
        stale_frames=stale,
        dup_frames=dups,
        decode_errors=decode_errors,
        heartbeats_seen=heartbeats,
        clamped_actuations=clamped,
        hit_runtime_guard=hit_guard,
    )


@dataclass
class ControllerNodeResult:
    decisions: list                # (cycle, status, solve_time_s)
    dup_frames: int
    stale_frames: int
    gap_cycles: int
    decode_errors: int
    idle_timeouts: int
    heartbeats_sent: int
    rejected_measurements: int
    hit_runtime_guard: bool

    def summary(self) -> str:
        return "\n".join([
            f"decisions:        {len(self.decisions)}",
            f"stale/dup frames: {self.stale_frames} / {self.dup_frames}",
            f"gap cycles:       {self.gap_cycles}",
            f"decode errors:    {self.decode_errors}",
            f"idle timeouts:    {self.idle_timeouts} "
            f"(heartbeats sent: {self.heartbeats_sent})",
            f"rejected measurements: {self.rejected_measurements}",
        ])


def controller_node(weights: NetworkWeights, settings: ControllerSettings,
                    *, initial_actuation=None, bind_addr=("127.0.0.1", 0),
                    sock=None, plant_addr=None, max_decisions=None,
                    config: NodeConfig = None,
                    stop_event: threading.Event = None) -> ControllerNodeResult:
    """Serve actuation decisions over UDP until done or abandoned.

    Replies go to the address each measurement arrived from.  Idle
    periods produce heartbeats (to ``plant_addr`` if configured, else
    the last known peer) and the node gives up after ``idle_limit``
    consecutive quiet timeouts.
    """
    cfg = config if config is not None else NodeConfig()
    u_init = (default_initial_actuation() if initial_actuation is None
              else np.asarray(initial_actuation, dtype=float))
    controller = CycleController(weights, settings, u_init)
    sock, own_sock = _open_socket(bind_addr, sock)
    sock.settimeout(cfg.idle_timeout_s)

    decisions = []
    dups = 0
    stale = 0
    gaps = 0
    decode_errors = 0
    idle = 0
    heartbeats_sent = 0
    rejected = 0
    hit_guard = False
    consecutive_idle = 0
    last_seq = -1
    last_cycle = None
    peer = plant_addr
    seq_out = 0
    t_start = time.perf_counter()
    max_runtime = cfg.max_runtime_s

    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        while True:
            if stop_event is not None and stop_event.is_set():
                break
            if max_runtime is not None and \
                    time.perf_counter() - t_start > max_runtime:
                hit_guard = True
                break
            try:
                data, addr = sock.recvfrom(2048)
            except socket.timeout:
                idle += 1
                consecutive_idle += 1
                if peer is not None:
                    sock.sendto(wire.encode_heartbeat(seq_out), peer)
                    seq_out += 1
                    heartbeats_sent += 1
                if consecutive_idle >= cfg.idle_limit:
                    break
                continue
            consecutive_idle = 0
            try:
                seq, msg = wire.decode_frame(data)
            except wire.WireError:
                decode_errors += 1
                continue
            if isinstance(msg, wire.HeartbeatMsg):
                continue
            if not isinstance(msg, wire.MeasurementMsg):
                stale += 1
                continue
            if seq <= last_seq:
                dups += 1
                continue
            last_seq = seq
            if last_cycle is not None:
                if msg.cycle <= last_cycle:
                    stale += 1
                    continue
                gaps += msg.cycle - last_cycle - 1
            last_cycle = msg.cycle
            peer = addr

            try:
                decision = controller.on_measurement(
                    msg.cycle, msg.imep, msg.ca50, msg.ref_imep, msg.ref_ca50)
            except ValueError:
                rejected += 1
                continue
            reply = wire.ActuationMsg(
                cycle=msg.cycle,
                doi_fuel=float(decision.actuation[0]),
                doi_water=float(decision.actuation[1]),
                nvo=float(decision.actuation[2]),
                solve_time_us=int(round(decision.solve_time_s * 1e6)),
                status=wire.STATUS_CODES.get(decision.status,
                                             wire.STATUS_ABORTED),
            )
            sock.sendto(wire.encode_actuation(seq_out, reply), addr)
            seq_out += 1
            decisions.append((msg.cycle, decision.status,
                              decision.solve_time_s))
            if max_decisions is not None and len(decisions) >= max_decisions:
                break
    finally:
        if own_sock:
            sock.close()
        if gc_was_enabled:
            gc.enable()

    return ControllerNodeResult(
        decisions=decisions,
        dup_frames=dups,
        stale_frames=stale,
        gap_cycles=gaps,
        decode_errors=decode_errors,
        idle_timeouts=idle,
        heartbeats_sent=heartbeats_sent,
        rejected_measurements=rejected,
        hit_runtime_guard=hit_guard,
    )


@dataclass
class LoopbackResult:
    plant: PlantNodeResult
    controller: ControllerNodeResult


def run_split_loopback(weights: NetworkWeights, settings: ControllerSettings,
                       reference, *, plant_params=None, seed=0,
                       initial_actuation=None,
                       config: NodeConfig = None) -> LoopbackResult:
    """Both nodes on localhost: controller in a thread, plant here."""
    cfg = config if config is not None else NodeConfig()
    reference = np.asarray(reference, dtype=float)

    ctrl_sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    ctrl_sock.bind(("127.0.0.1", 0))
    ctrl_addr = ctrl_sock.getsockname()

    ctrl_result = {}
    stop_event = threading.Event()

    def run_ctrl():
        ctrl_result["value"] = controller_node(
            weights, settings, initial_actuation=initial_actuation,
            sock=ctrl_sock, max_decisions=reference.shape[0],
            config=cfg, stop_event=stop_event)

    thread = threading.Thread(target=run_ctrl, daemon=True)
    thread.start()
    try:
        plant = plant_node(reference, ctrl_addr, plant_params=plant_params,
                           seed=seed, initial_actuation=initial_actuation,
                           bounds=settings.bounds, config=cfg)
    finally:
        stop_event.set()
        thread.join(timeout=10.0)
        ctrl_sock.close()

    controller = ctrl_result.get("value")
    if controller is None:
        raise RuntimeError("controller node did not return")
    return LoopbackResult(plant=plant, controller=controller)
