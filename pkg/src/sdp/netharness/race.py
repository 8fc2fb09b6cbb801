"""
Multi-queue race scenarios for the emulated TLS offload engine.

A scenario lists segment submissions (rpc, record seq, submitting queue) in
driver order. Each scenario runs twice: once with a single flow context shared
by every RPC on the five-tuple, and once with a flow context per RPC. Small
scenarios are checked under every engine interleaving; larger ones under
seeded random schedules. A receiver opens every emitted record, so an invalid
tag shows up the way it would on the wire: as an AuthFailure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from ..errors import AuthFailure, ConfigError
from ..nic import EngineSchedule, Nic, Policy, TsoSegment, interleavings
from ..record import SealedRecord, SessionKeys, open_segment
from ..wire import NetworkHeader, OverlaidHeader, build_segment_plaintext, payload_capacity

EXHAUSTIVE_LIMIT = 6
RANDOM_SCHEDULES = 1000
MODES = ("shared", "per_message")

_KEY = bytes(range(16))
_IV = bytes(range(100, 112))
_FIVE_TUPLE = (0x0A000001, 0x0A000002, 0xFD, 40000, 5000)


@dataclass
class Submission:
    rpc: int
    seq: int
    queue: int = 0


@dataclass
class RaceScenario:
    name: str
    queues: int
    initial_seq: int
    submissions: list
    seed: int = 0
    random_schedules: int = RANDOM_SCHEDULES

    @classmethod
    def from_dict(cls, d: dict) -> "RaceScenario":
        bad = {}
        for key in ("name", "queues", "submissions"):
            if key not in d:
                bad[key] = "required"
        if bad:
            raise ConfigError(bad)
        subs = [Submission(int(s["rpc"]), int(s["seq"]), int(s.get("queue", 0))) for s in d["submissions"]]
        sc = cls(d["name"], int(d["queues"]), int(d.get("initial_seq", 0)), subs,
                 int(d.get("seed", 0)), int(d.get("random_schedules", RANDOM_SCHEDULES)))
        if sc.queues < 1:
            bad["queues"] = "must be at least 1"
        if any(not 0 <= s.queue < sc.queues for s in subs):
            bad["submissions"] = "queue index out of range"
        if not subs:
            bad["submissions"] = "empty"
        if bad:
            raise ConfigError(bad)
        return sc

    @classmethod
    def load(cls, path: str | Path) -> "RaceScenario":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ModeReport:
    mode: str
    descriptors: int
    exhaustive: bool
    schedules: int = 0
    failing_schedules: int = 0
    auth_failures: int = 0
    invalid_tags: int = 0


@dataclass
class ScenarioReport:
    name: str
    modes: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = []
        for m in self.modes.values():
            kind = "exhaustive" if m.exhaustive else "random"
            out.append(f"{self.name:<14} {m.mode:<12} descriptors={m.descriptors:<3} {kind:<10} "
                       f"schedules={m.schedules:<6} failing={m.failing_schedules:<6} "
                       f"auth_failures={m.auth_failures}")
        return out


def _segment(sub: Submission, cap: int) -> TsoSegment:
    body = f"rpc {sub.rpc} record {sub.seq}".encode()
    header = OverlaidHeader(40000, 5000, sub.rpc, len(body))
    net = NetworkHeader(_FIVE_TUPLE[0], _FIVE_TUPLE[1])
    return TsoSegment(net, header, sub.seq, plaintext=build_segment_plaintext(body, cap))


def _load(sc: RaceScenario, mode: str, mtu: int = 1500) -> Nic:
    """Fresh NIC with every submission queued for ``mode``."""
    nic = Nic(n_queues=sc.queues, pool_size=max(4, len(sc.submissions)), mtu=mtu)
    keys = SessionKeys(_KEY, _IV)
    cap = payload_capacity(mtu)
    if mode == "shared":
        ctx = nic.shared_context(_FIVE_TUPLE, keys, sc.initial_seq)
        for sub in sc.submissions:
            nic.driver_submit(_segment(sub, cap), ctx, sub.queue)
    else:
        contexts = {}
        for sub in sc.submissions:
            ctx = contexts.get(sub.rpc)
            if ctx is None:
                ctx = contexts[sub.rpc] = nic.pool.allocate_context(sub.rpc, _FIVE_TUPLE)
                first = min(s.seq for s in sc.submissions if s.rpc == sub.rpc)
                nic.install(ctx, keys, first)
            nic.driver_submit(_segment(sub, cap), ctx)
    return nic


def _run_one(sc: RaceScenario, mode: str, schedule: EngineSchedule) -> tuple[int, int]:
    nic = _load(sc, mode)
    rx = SessionKeys(_KEY, _IV)
    failures = invalid = 0
    for em in nic.drain(schedule):
        invalid += not em.tag_valid
        try:
            open_segment(rx, SealedRecord.from_bytes(em.record))
        except AuthFailure:
            failures += 1
    return failures, invalid


def run_mode(sc: RaceScenario, mode: str) -> ModeReport:
    lengths = [len(q) for q in _load(sc, mode).queues]
    total = sum(lengths)
    exhaustive = total <= EXHAUSTIVE_LIMIT
    report = ModeReport(mode, total, exhaustive)
    if exhaustive:
        schedules = (EngineSchedule(sc.seed, Policy.ADVERSARIAL, order) for order in interleavings(lengths))
    else:
        schedules = (EngineSchedule(sc.seed * 1_000_003 + i, Policy.RANDOM) for i in range(sc.random_schedules))
    for schedule in schedules:
        failures, invalid = _run_one(sc, mode, schedule)
        report.schedules += 1
        report.auth_failures += failures
        report.invalid_tags += invalid
        report.failing_schedules += failures > 0
    return report


def run_race_scenario(sc: RaceScenario) -> ScenarioReport:
    rep = ScenarioReport(sc.name)
    for mode in MODES:
        rep.modes[mode] = run_mode(sc, mode)
    return rep


def builtin_scenario_dir() -> Path:
    return Path(str(resources.files("sdp.netharness") / "scenarios"))


def race_suite(scenario_dir: str | Path | None = None) -> list[ScenarioReport]:
    directory = Path(scenario_dir) if scenario_dir is not None else builtin_scenario_dir()
    paths = sorted(directory.glob("*.json"))
    if not paths:
        raise ConfigError({"scenario_dir": f"no scenario JSON files in {directory}"})
    return [run_race_scenario(RaceScenario.load(p)) for p in paths]
