"""Per-stream decoding of output grids into drop counts and flow rate."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_TAU = 0.3
DEFAULT_DEBOUNCE = 2
DEFAULT_WINDOW = 3
DEFAULT_MARGIN = 2


class TimeRegressionError(ValueError):
    pass


@dataclass(frozen=True)
class DropObservation:
    t: float
    detected: bool
    s_hat: int
    cell: tuple[int, int]
    confidence: float


@dataclass
class CounterState:
    stable_state: int | None = None  # None until the first state is confirmed
    pending_state: int | None = None
    pending_run: int = 0
    pending_start: float | None = None
    drop_count: int = 0
    detach_times: list[float] = field(default_factory=list)
    last_t: float | None = None


@dataclass(frozen=True)
class DripEvent:
    t: float
    drop_count: int
    cell: tuple[int, int]


@dataclass(frozen=True)
class FlowRateSample:
    t: float
    q: float  # gtt/min
    window_n: int


@dataclass(frozen=True)
class FramingAlarm:
    t: float
    cell: tuple[int, int]
    margin_cells: int


def extract_observation(grid: np.ndarray, t: float, tau: float = DEFAULT_TAU) -> DropObservation:
    """Decode the state as the layer holding the grid's peak value.

    Ties go to the lower state, then to the row-major first cell (numpy's
    argmax order). ``detected`` is False when the peak is under ``tau``.
    """
    if grid.ndim != 3 or grid.shape[2] != 2 or grid.shape[0] != grid.shape[1]:
        raise ValueError(f"expected an S x S x 2 grid, got {grid.shape}")
    if not 0 < tau < 1:
        raise ValueError("tau must be in (0, 1)")
    layer_max = grid.reshape(-1, 2).max(axis=0)
    s_hat = int(np.argmax(layer_max))
    flat = int(np.argmax(grid[:, :, s_hat]))
    cell = divmod(flat, grid.shape[1])
    peak = float(layer_max[s_hat])
    return DropObservation(float(t), peak >= tau, s_hat, (int(cell[0]), int(cell[1])), peak)


def update_counter(state: CounterState, obs: DropObservation,
                   debounce_m: int = DEFAULT_DEBOUNCE) -> tuple[CounterState, DripEvent | None]:
    """Advance the debounced 1 -> 0 counter by one observation (mutates ``state``).

    A raw state becomes stable after ``debounce_m`` consecutive detected frames
    agreeing on it. Undetected frames are skipped: they neither extend nor break
    a pending run. Events are stamped with the first frame of the new run.
    """
    if debounce_m < 1:
        raise ValueError("debounce_m must be >= 1")
    if state.last_t is not None and obs.t < state.last_t:
        raise TimeRegressionError(f"observation at t={obs.t} after t={state.last_t}")
    state.last_t = obs.t
    if not obs.detected:
        return state, None

    raw = obs.s_hat
    if raw == state.stable_state:
        state.pending_state, state.pending_run, state.pending_start = None, 0, None
        return state, None
    if raw == state.pending_state:
        state.pending_run += 1
    else:
        state.pending_state, state.pending_run, state.pending_start = raw, 1, obs.t
    if state.pending_run < debounce_m:
        return state, None

    previous = state.stable_state
    state.stable_state = raw
    start = state.pending_start
    state.pending_state, state.pending_run, state.pending_start = None, 0, None
    if previous == 1 and raw == 0:
        if state.detach_times and start <= state.detach_times[-1]:
            raise TimeRegressionError("detach times must be strictly increasing")
        state.drop_count += 1
        state.detach_times.append(start)
        return state, DripEvent(start, state.drop_count, obs.cell)
    return state, None


def flow_rate(detach_times, window_n: int = DEFAULT_WINDOW) -> FlowRateSample | None:
    """Q = N / (t_i - t_{i-N}) in gtt/min at the latest detach t_i (times in seconds)."""
    if window_n < 1:
        raise ValueError("window_n must be >= 1")
    if len(detach_times) < window_n + 1:
        return None
    t_i, t_0 = detach_times[-1], detach_times[-1 - window_n]
    if t_i <= t_0:
        raise ValueError(f"duplicate or unordered detach times {t_0}, {t_i}")
    return FlowRateSample(float(t_i), 60.0 * window_n / (t_i - t_0), window_n)


def in_margin(cell: tuple[int, int], S: int, margin_cells: int) -> bool:
    i, j = cell
    return min(i, j, S - 1 - i, S - 1 - j) < margin_cells


def check_framing(obs: DropObservation, S: int, margin_cells: int = DEFAULT_MARGIN) -> FramingAlarm | None:
    if obs.detected and in_margin(obs.cell, S, margin_cells):
        return FramingAlarm(obs.t, obs.cell, margin_cells)
    return None


@dataclass
class CounterConfig:
    tau: float = DEFAULT_TAU
    debounce_m: int = DEFAULT_DEBOUNCE
    window_n: int = DEFAULT_WINDOW
    margin_cells: int = DEFAULT_MARGIN


class StreamMonitor:
    """The full per-stream chain: grid -> observation -> counter -> flow/alarm records.

    Records are plain dicts ready for ``events.jsonl`` (detach/alarm) and
    ``flow.csv`` (flow). An alarm is raised when the drop enters the edge band
    and re-armed once a detected drop is seen outside it.
    """

    def __init__(self, stream_id: str, grid_size: int, cfg: CounterConfig | None = None):
        self.stream_id = stream_id
        self.S = grid_size
        self.cfg = cfg or CounterConfig()
        self.state = CounterState()
        self.flow: list[FlowRateSample] = []
        self._alarm_active = False

    @property
    def drop_count(self) -> int:
        return self.state.drop_count

    def process(self, grid: np.ndarray, t: float) -> list[dict]:
        obs = extract_observation(grid, t, self.cfg.tau)
        return self.process_observation(obs)

    def process_observation(self, obs: DropObservation) -> list[dict]:
        out = []
        _, ev = update_counter(self.state, obs, self.cfg.debounce_m)
        if ev is not None:
            out.append({"stream_id": self.stream_id, "t": ev.t, "kind": "detach",
                        "drop_count": ev.drop_count, "cell": list(ev.cell)})
            q = flow_rate(self.state.detach_times, self.cfg.window_n)
            if q is not None:
                self.flow.append(q)
                out.append({"stream_id": self.stream_id, "t": q.t, "kind": "flow",
                            "q_gtt_min": q.q, "window_n": q.window_n})
        if obs.detected:
            alarm = check_framing(obs, self.S, self.cfg.margin_cells)
            if alarm is not None and not self._alarm_active:
                out.append({"stream_id": self.stream_id, "t": alarm.t, "kind": "alarm",
                            "drop_count": self.state.drop_count, "cell": list(alarm.cell)})
            self._alarm_active = alarm is not None
        return out
