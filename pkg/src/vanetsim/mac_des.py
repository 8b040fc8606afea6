"""Slot-synchronous discrete-event simulator of the CSMA/CA cell.

Brute-force counterpart of mac_analytic: N stations with finite FIFO
queues contend with AIFS sensing plus binary-exponential back-off, and
everything is counted instead of approximated. Used as the measurement
oracle the analytical model is validated against.

The event loop walks idle phases in bulk: nothing can happen between
"the next station counter reaches zero" and "the next packet lands at
an empty station", so the clock jumps straight to the earlier of the
two. Busy periods (success or collision) end every idle phase and
reset AIFS sensing for everyone, which is the EDCA rule. The channel
occupancy of a busy period excludes the AIFS share of t_s/t_f, because
here AIFS is simulated literally as sensed idle slots.

Arrivals at non-empty stations cannot change contention state, so each
station's Poisson stream is materialized lazily: pending packets are
folded in when that station's queue is next touched. This keeps the
loop O(channel events), not O(arrivals).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum
from random import Random

from . import constants
from .errors import ConfigurationError
from .mac_analytic import MacParams, transmission_times

BATCH_COUNT = 20
DEFAULT_MIN_DELIVERED = 1000

# two-sided 95% Student-t critical values by degrees of freedom
_T95 = {1: 12.706, 2: 4.303, 3: 3.182, 4: 2.776, 5: 2.571, 6: 2.447,
        7: 2.365, 8: 2.306, 9: 2.262, 10: 2.228, 11: 2.201, 12: 2.179,
        13: 2.160, 14: 2.145, 15: 2.131, 16: 2.120, 17: 2.110, 18: 2.101,
        19: 2.093, 20: 2.086, 25: 2.060, 30: 2.042}


def _t95(df: int) -> float:
    if df <= 0:
        return math.inf
    while df not in _T95 and df < 30:
        df += 1
    return _T95.get(df, 1.96)


class ArrivalProcess(Enum):
    POISSON = "poisson"


class AcMode(Enum):
    SINGLE_AC = "single_ac"
    FOUR_AC = "four_ac"


@dataclass(frozen=True)
class DesConfig:
    mac_params: MacParams
    seed: int
    measured_duration: float
    warmup: float | None = None          # None -> 10% of measured_duration
    arrival_process: ArrivalProcess = ArrivalProcess.POISSON
    ac_mode: AcMode = AcMode.SINGLE_AC
    min_delivered: int = DEFAULT_MIN_DELIVERED
    collect_trace: bool = False

    def validate(self) -> "DesConfig":
        bad = self.mac_params.problems()
        if not self.measured_duration > 0:
            bad.append(f"measured_duration must be > 0, got {self.measured_duration}")
        if self.warmup is not None and self.warmup < 0:
            bad.append(f"warmup must be >= 0, got {self.warmup}")
        if self.min_delivered < 0:
            bad.append(f"min_delivered must be >= 0, got {self.min_delivered}")
        if bad:
            raise ConfigurationError("invalid DesConfig: " + "; ".join(bad))
        return self

    @property
    def warmup_time(self) -> float:
        return 0.1 * self.measured_duration if self.warmup is None else self.warmup


@dataclass
class DesStats:
    """Measured counterparts of the analytical cell metrics."""

    delivered_per_station: float     # packets/second, per station
    mean_total_delay: float | None   # birth -> ACK, delivered packets
    drop_rate: float                 # (rejected + retry-dropped) / offered
    empty_fraction: float            # time-average of the q0 estimate
    collision_fraction: float        # colliding attempts / air attempts
    confidence_halfwidth: dict[str, float]
    mean_service_time: float | None  # head-of-line -> completion or final drop
    # full-run conservation counters
    generated: int
    delivered: int
    rejected: int
    retry_dropped: int
    in_system: int
    attempts: int
    air_collisions: int
    internal_collisions: int
    # occupancy measured over the stats window, for Little's-law checks
    mean_system_size: float
    accepted_rate: float
    mean_sojourn: float | None       # accepted packets, birth -> leave
    duration_measured: float
    per_ac_delivered: dict[str, float] | None = None
    per_ac_delay: dict[str, float | None] | None = None
    trace: list | None = None        # (id, entity, birth, attempts, fate, done)

    def as_record(self) -> dict:
        rec = {
            "delivered_per_station": self.delivered_per_station,
            "mean_total_delay": self.mean_total_delay,
            "drop_rate": self.drop_rate,
            "empty_fraction": self.empty_fraction,
            "collision_fraction": self.collision_fraction,
            "mean_service_time": self.mean_service_time,
            "generated": self.generated,
            "delivered": self.delivered,
            "rejected": self.rejected,
            "retry_dropped": self.retry_dropped,
            "in_system": self.in_system,
            "attempts": self.attempts,
            "air_collisions": self.air_collisions,
            "internal_collisions": self.internal_collisions,
            "mean_system_size": self.mean_system_size,
            "accepted_rate": self.accepted_rate,
            "mean_sojourn": self.mean_sojourn,
            "duration_measured": self.duration_measured,
        }
        for name, hw in self.confidence_halfwidth.items():
            rec[f"ci95_{name}"] = hw
        if self.per_ac_delivered is not None:
            for name, rate in self.per_ac_delivered.items():
                rec[f"delivered_{name}"] = rate
        if self.per_ac_delay is not None:
            for name, dly in self.per_ac_delay.items():
                rec[f"delay_{name}"] = dly
        return rec


class _Entity:
    """One contending queue: a station, or one AC of a station."""

    __slots__ = ("idx", "station", "ac", "lam", "aifs", "windows", "max_stage",
                 "queue", "aifs_left", "backoff", "stage", "hol_start",
                 "next_arrival", "empty_since", "last_sync", "attempts_hol")

    def __init__(self, idx, station, ac, lam, aifs, windows):
        self.idx = idx
        self.station = station
        self.ac = ac
        self.lam = lam
        self.aifs = aifs
        self.windows = windows
        self.max_stage = len(windows)
        self.queue: list[float] = []     # birth times, FIFO
        self.aifs_left = 0
        self.backoff = 0
        self.stage = 0
        self.hol_start = 0.0
        self.next_arrival = 0.0
        self.empty_since = 0.0
        self.last_sync = 0.0
        self.attempts_hol = 0


def _build_entities(cfg: DesConfig, rng: Random) -> list[_Entity]:
    p = cfg.mac_params
    ents = []
    if cfg.ac_mode is AcMode.SINGLE_AC:
        windows = tuple(p.w0 * p.alpha ** min(i, p.m_stages)
                        for i in range(p.retry_stages))
        for s in range(p.n_stations):
            ents.append(_Entity(len(ents), s, "single", p.arrival_rate,
                                p.aifs_slots, windows))
    else:
        for s in range(p.n_stations):
            for ac in constants.AC_PRIORITY:
                e = constants.EDCA_PARAMETER_SETS[ac]
                stages = e["m_stages"] + e["f_extra"]
                windows = tuple(e["w0"] * p.alpha ** min(i, e["m_stages"])
                                for i in range(stages))
                ents.append(_Entity(len(ents), s, ac, p.arrival_rate,
                                    e["aifs_slots"], windows))
    for e in ents:
        e.next_arrival = rng.expovariate(e.lam)
    return ents


def simulate(config: DesConfig) -> DesStats:
    """Run one replication and return measured statistics.

    Deterministic for a fixed config (seed included). Raises a
    configuration error when fewer than config.min_delivered packets
    complete inside the measured window.
    """
    config.validate()
    p = config.mac_params
    rng = Random(config.seed)
    slot = p.slot_time
    t_s, t_f = transmission_times(p)
    t_aifs = p.aifs_slots * slot
    dur_success = t_s - t_aifs
    dur_collision = t_f - t_aifs
    cap = p.queue_capacity

    warmup = config.warmup_time
    horizon = warmup + config.measured_duration
    batch_len = config.measured_duration / BATCH_COUNT

    ents = _build_entities(config, rng)
    four_ac = config.ac_mode is AcMode.FOUR_AC

    generated = delivered = rejected = retry_dropped = 0
    attempts = air_collisions = internal_collisions = 0
    m_offered = [0] * BATCH_COUNT
    m_dropped = [0] * BATCH_COUNT
    m_delivered = [0] * BATCH_COUNT
    m_delay_sum = [0.0] * BATCH_COUNT
    m_attempts = 0
    m_collisions = 0
    service_sum = 0.0
    service_count = 0
    sojourn_sum = 0.0
    sojourn_count = 0
    empty_time = 0.0
    size_integral = 0.0
    trace: list | None = [] if config.collect_trace else None
    ac_delivered = dict.fromkeys(constants.AC_PRIORITY, 0) if four_ac else None
    ac_delay_sum = dict.fromkeys(constants.AC_PRIORITY, 0.0) if four_ac else None

    def window_overlap(a: float, b: float) -> float:
        return max(0.0, min(b, horizon) - max(a, warmup))

    def batch_of(t: float) -> int:
        if warmup <= t < horizon:
            b = int((t - warmup) / batch_len)
            return b if b < BATCH_COUNT else BATCH_COUNT - 1
        return -1

    def sync_arrivals(e: _Entity, upto: float) -> None:
        """Fold e's Poisson stream into its queue through time `upto`.

        Only valid while e stays non-empty (no departures in between),
        which is exactly when laziness is safe.
        """
        nonlocal generated, rejected, size_integral
        while e.next_arrival <= upto and e.queue:
            ta = e.next_arrival
            size_integral += len(e.queue) * window_overlap(e.last_sync, ta)
            e.last_sync = ta
            generated += 1
            b = batch_of(ta)
            if b >= 0:
                m_offered[b] += 1
            if len(e.queue) >= cap:
                rejected += 1
                if b >= 0:
                    m_dropped[b] += 1
                if trace is not None:
                    trace.append([e.idx, ta, 0, "rejected", ta])
            else:
                e.queue.append(ta)
            e.next_arrival = ta + rng.expovariate(e.lam)

    def admit_first(e: _Entity) -> None:
        """Arrival at an empty entity: it becomes a contender."""
        nonlocal generated, empty_time
        ta = e.next_arrival
        empty_time += window_overlap(e.empty_since, ta)
        e.last_sync = ta
        generated += 1
        b = batch_of(ta)
        if b >= 0:
            m_offered[b] += 1
        e.queue.append(ta)
        e.hol_start = ta
        e.stage = 0
        e.attempts_hol = 0
        e.backoff = rng.randrange(e.windows[0])
        e.aifs_left = e.aifs
        e.next_arrival = ta + rng.expovariate(e.lam)

    def pop_head(e: _Entity, now: float) -> None:
        """Head packet leaves (delivered or dropped); next one takes over."""
        nonlocal size_integral
        size_integral += len(e.queue) * window_overlap(e.last_sync, now)
        e.last_sync = now
        e.queue.pop(0)
        e.stage = 0
        e.attempts_hol = 0
        if e.queue:
            e.hol_start = now
            e.backoff = rng.randrange(e.windows[0])
        else:
            e.empty_since = now

    t0 = 0.0  # start of the current idle phase
    while t0 < horizon:
        # walk idle slots until a transmission fires inside the horizon
        pos = 0
        transmitters: list[_Entity] = []
        while True:
            rem_trans = -1
            for e in ents:
                if e.queue:
                    need = e.aifs_left + e.backoff
                    if rem_trans < 0 or need < rem_trans:
                        rem_trans = need
            arr_entity = None
            arr_time = math.inf
            for e in ents:
                if not e.queue and e.next_arrival < arr_time:
                    arr_time = e.next_arrival
                    arr_entity = e
            if arr_entity is not None:
                boundary = math.ceil((arr_time - t0) / slot - 1e-12)
                rem_arr = boundary - pos if boundary > pos else 0
            else:
                rem_arr = -1
            if rem_trans >= 0 and (rem_arr < 0 or rem_trans <= rem_arr):
                for e in ents:
                    if e.queue:
                        a = e.aifs_left if e.aifs_left < rem_trans else rem_trans
                        e.aifs_left -= a
                        e.backoff -= rem_trans - a
                pos += rem_trans
                transmitters = [e for e in ents
                                if e.queue and e.aifs_left == 0 and e.backoff == 0]
                break
            if arr_entity is None:
                t0 = horizon  # nothing queued, nothing pending anywhere
                break
            if arr_time >= horizon:
                t0 = horizon  # nothing else can happen inside the horizon
                break
            for e in ents:
                if e.queue:
                    a = e.aifs_left if e.aifs_left < rem_arr else rem_arr
                    e.aifs_left -= a
                    e.backoff -= rem_arr - a
            pos += rem_arr
            admit_first(arr_entity)
        if not transmitters:
            continue
        now = t0 + pos * slot
        if now >= horizon:
            break

        # internal collisions first: one winner per station takes the air
        if four_ac:
            by_station: dict[int, list[_Entity]] = {}
            for e in transmitters:
                by_station.setdefault(e.station, []).append(e)
            on_air = []
            losers = []
            for group in by_station.values():
                group.sort(key=lambda e: constants.AC_PRIORITY.index(e.ac))
                on_air.append(group[0])
                losers.extend(group[1:])
            internal_collisions += len(losers)
        else:
            on_air = transmitters
            losers = []

        success = len(on_air) == 1
        t_end = now + (dur_success if success else dur_collision)
        in_window = warmup <= now < horizon
        attempts += len(on_air)
        if in_window:
            m_attempts += len(on_air)
        if not success:
            air_collisions += len(on_air)
            if in_window:
                m_collisions += len(on_air)
        for e in on_air:
            e.attempts_hol += 1

        if success:
            e = on_air[0]
            sync_arrivals(e, t_end)
            birth = e.queue[0]
            delivered += 1
            b = batch_of(t_end)
            if b >= 0:
                if ac_delivered is not None:
                    ac_delivered[e.ac] += 1
                    ac_delay_sum[e.ac] += t_end - birth
                m_delivered[b] += 1
                m_delay_sum[b] += t_end - birth
                service_sum += t_end - e.hol_start
                service_count += 1
                sojourn_sum += t_end - birth
                sojourn_count += 1
            if trace is not None:
                trace.append([e.idx, birth, e.attempts_hol, "delivered", t_end])
            pop_head(e, t_end)
        else:
            failed = sorted(on_air + losers, key=lambda e: e.idx)
            for e in failed:
                e.stage += 1
                if e.stage >= e.max_stage:
                    sync_arrivals(e, t_end)
                    birth = e.queue[0]
                    retry_dropped += 1
                    b = batch_of(t_end)
                    if b >= 0:
                        m_dropped[b] += 1
                        service_sum += t_end - e.hol_start
                        service_count += 1
                        sojourn_sum += t_end - birth
                        sojourn_count += 1
                    if trace is not None:
                        trace.append([e.idx, birth, e.attempts_hol,
                                      "dropped", t_end])
                    pop_head(e, t_end)
                else:
                    e.backoff = rng.randrange(e.windows[e.stage])

        for e in ents:
            if e.queue:
                e.aifs_left = e.aifs
        t0 = t_end

    # close the books at the horizon
    for e in ents:
        if e.queue:
            sync_arrivals(e, horizon)
            size_integral += len(e.queue) * window_overlap(e.last_sync, horizon)
        else:
            empty_time += window_overlap(e.empty_since, horizon)
        if trace is not None:
            for birth in e.queue:
                trace.append([e.idx, birth, 0, "pending", None])
    in_system = sum(len(e.queue) for e in ents)

    if generated != delivered + rejected + retry_dropped + in_system:
        raise AssertionError("packet conservation violated")  # pragma: no cover

    measured_delivered = sum(m_delivered)
    if measured_delivered < config.min_delivered:
        raise ConfigurationError(
            f"only {measured_delivered} packets delivered in the measured "
            f"window (need >= {config.min_delivered}); extend the horizon")

    if trace is not None:
        trace.sort(key=lambda row: (row[1], row[0]))
        trace = [[i] + row for i, row in enumerate(trace)]

    offered = sum(m_offered)
    dropped = sum(m_dropped)
    dur_m = config.measured_duration

    def halfwidth(values: list[float]) -> float:
        n = len(values)
        if n < 2:
            return math.inf
        mean = sum(values) / n
        var = sum((v - mean) ** 2 for v in values) / (n - 1)
        return _t95(n - 1) * math.sqrt(var / n)

    rate_batches = [m_delivered[i] / batch_len / p.n_stations
                    for i in range(BATCH_COUNT)]
    delay_batches = [m_delay_sum[i] / m_delivered[i]
                     for i in range(BATCH_COUNT) if m_delivered[i] > 0]
    drop_batches = [m_dropped[i] / m_offered[i]
                    for i in range(BATCH_COUNT) if m_offered[i] > 0]

    return DesStats(
        delivered_per_station=measured_delivered / dur_m / p.n_stations,
        mean_total_delay=(sum(m_delay_sum) / measured_delivered
                          if measured_delivered else None),
        drop_rate=dropped / offered if offered else 0.0,
        empty_fraction=empty_time / (len(ents) * dur_m),
        collision_fraction=m_collisions / m_attempts if m_attempts else 0.0,
        confidence_halfwidth={
            "delivered_per_station": halfwidth(rate_batches),
            "mean_total_delay": halfwidth(delay_batches),
            "drop_rate": halfwidth(drop_batches),
        },
        mean_service_time=service_sum / service_count if service_count else None,
        generated=generated, delivered=delivered, rejected=rejected,
        retry_dropped=retry_dropped, in_system=in_system,
        attempts=attempts, air_collisions=air_collisions,
        internal_collisions=internal_collisions,
        mean_system_size=size_integral / dur_m,
        accepted_rate=sojourn_count / dur_m,
        mean_sojourn=sojourn_sum / sojourn_count if sojourn_count else None,
        duration_measured=dur_m,
        per_ac_delivered=({ac: cnt / dur_m for ac, cnt in ac_delivered.items()}
                          if ac_delivered is not None else None),
        per_ac_delay=({ac: (ac_delay_sum[ac] / cnt if cnt else None)
                       for ac, cnt in ac_delivered.items()}
                      if ac_delivered is not None else None),
        trace=trace,
    )


def single_ac_approximation_check(lambda_per_ac: float, *,
                                  mac_params: MacParams | None = None,
                                  seed: int = 1,
                                  measured_duration: float = 30.0,
                                  min_delivered: int = 200) -> float:
    """Relative error of collapsing four ACs into one queue at 4x the rate.

    Runs the four-queue system with each AC offered lambda_per_ac and a
    single best-effort queue offered 4*lambda_per_ac, then compares the
    per-AC share of the single-queue throughput against the measured
    best-effort throughput (both network-wide rates).
    """
    if not lambda_per_ac > 0:
        raise ConfigurationError("lambda_per_ac must be > 0")
    template = mac_params if mac_params is not None else MacParams(
        n_stations=10, arrival_rate=lambda_per_ac)
    base = asdict(template)
    base["access_mode"] = template.access_mode  # asdict loses the enum identity
    base_four = MacParams(**{**base, "arrival_rate": lambda_per_ac})
    base_single = MacParams(**{**base, "arrival_rate": 4.0 * lambda_per_ac})
    stats_four = simulate(DesConfig(
        mac_params=base_four, seed=seed, measured_duration=measured_duration,
        ac_mode=AcMode.FOUR_AC, min_delivered=min_delivered))
    stats_single = simulate(DesConfig(
        mac_params=base_single, seed=seed + 1,
        measured_duration=measured_duration,
        ac_mode=AcMode.SINGLE_AC, min_delivered=min_delivered))
    thr_be = stats_four.per_ac_delivered["ac_be"]
    if thr_be <= 0:
        raise ConfigurationError(
            "best-effort throughput is zero; cannot form a relative error")
    n = base_single.n_stations
    thr_single_share = stats_single.delivered_per_station * n / 4.0
    return abs(thr_single_share - thr_be) / thr_be
