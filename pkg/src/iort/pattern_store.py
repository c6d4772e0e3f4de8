"""Command-sequence learning store.

The store tree has exactly two children under the root: `ongoing`, holding
every command sequence ever observed (open or closed, append-only), and
`learning`, holding patterns promoted from sequences that were fully
successful and repeated often enough. Live sessions are prefix-matched
against the learned patterns after every observed command so the operator
can be offered the remainder.

Commands are compared after quantization (angles to the nearest degree,
gripper to 0.5 mm): servo repeatability makes finer matching meaningless.
All mutations for one arm must be serialized by the caller (the broker keeps
a single logical writer per arm).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .arm_model import JointConfig
from .protocol import JointCommand, PatternPrompt

OUTCOMES = ("pending", "ok", "rejected", "fault")
CLOSE_REASONS = ("idle_gap", "explicit_end", "session_end")

DEFAULT_PROMOTE_K = 3
DEFAULT_IDLE_GAP_MS = 10_000

# A lone command is not yet a sequence; prompting on every first command
# that happens to start some pattern would be pure noise.
MIN_MATCH_PREFIX = 2

QuantizedCommand = tuple[int, int, int, int, int, float]

_TARGET_FIELDS = (
    "base_deg",
    "shoulder_deg",
    "elbow_deg",
    "wrist_pitch_deg",
    "wrist_roll_deg",
    "gripper_mm",
)


class RestoreError(Exception):
    """Snapshot document is corrupt; the message names the first bad record."""


def quantize_targets(t: JointConfig) -> QuantizedCommand:
    return (
        round(t.base_deg),
        round(t.shoulder_deg),
        round(t.elbow_deg),
        round(t.wrist_pitch_deg),
        round(t.wrist_roll_deg),
        round(t.gripper_mm * 2) / 2.0,
    )


def quantized_to_config(qc: QuantizedCommand) -> JointConfig:
    return JointConfig(
        base_deg=float(qc[0]),
        shoulder_deg=float(qc[1]),
        elbow_deg=float(qc[2]),
        wrist_pitch_deg=float(qc[3]),
        wrist_roll_deg=float(qc[4]),
        gripper_mm=float(qc[5]),
    )


@dataclass
class SequenceEntry:
    command_id: str
    targets: JointConfig
    outcome: str = "pending"


@dataclass
class CommandSequence:
    sequence_id: str
    arm_id: str
    operator_id: str
    started_at_ms: int
    last_observed_ms: int
    commands: list[SequenceEntry] = field(default_factory=list)
    closed_at_ms: int | None = None
    close_reason: str | None = None
    poisoned: bool = False
    prompted_pattern_ids: list[str] = field(default_factory=list)

    @property
    def closed(self) -> bool:
        return self.closed_at_ms is not None

    @property
    def fully_successful(self) -> bool:
        return (
            self.closed
            and not self.poisoned
            and bool(self.commands)
            and all(e.outcome == "ok" for e in self.commands)
        )

    def quantized(self) -> tuple[QuantizedCommand, ...]:
        return tuple(quantize_targets(e.targets) for e in self.commands)


@dataclass
class LearnedPattern:
    pattern_id: str
    arm_id: str
    canonical_commands: tuple[QuantizedCommand, ...]
    use_count: int
    promoted_at_ms: int
    source_sequence_ids: list[str]


class PatternStore:
    def __init__(
        self,
        promote_k: int = DEFAULT_PROMOTE_K,
        idle_gap_ms: int = DEFAULT_IDLE_GAP_MS,
        on_promoted: Callable[[list[LearnedPattern]], None] | None = None,
    ) -> None:
        if promote_k < 1:
            raise ValueError("promotion threshold must be at least 1")
        if idle_gap_ms <= 0:
            raise ValueError("idle gap must be positive")
        self.promote_k = promote_k
        self.idle_gap_ms = idle_gap_ms
        self._on_promoted = on_promoted
        self._sequences: list[CommandSequence] = []
        self._open: dict[tuple[str, str], CommandSequence] = {}
        self._patterns: list[LearnedPattern] = []
        self._by_command: dict[str, CommandSequence] = {}
        self._seq_counter = 0
        self._pattern_counter = 0

    # -- observation ---------------------------------------------------

    def observe_command(self, cmd: JointCommand, now_ms: int) -> PatternPrompt | None:
        """Append an accepted command to the operator's open sequence.

        Opens a new sequence if none is open or the idle gap has elapsed
        (closing the stale one first), then prefix-matches the open sequence
        against the learned patterns for this arm. Returns at most one prompt
        per pattern per open sequence.
        """
        if cmd.id in self._by_command:
            # Command ids are unique per broker lifetime; a second observe
            # is a replay artifact (e.g. journal records after a snapshot).
            return None
        key = (cmd.arm_id, cmd.operator_id)
        seq = self._open.get(key)
        if seq is not None and now_ms - seq.last_observed_ms > self.idle_gap_ms:
            self.close_sequence(cmd.arm_id, cmd.operator_id, "idle_gap", now_ms)
            seq = None
        if seq is None:
            self._seq_counter += 1
            seq = CommandSequence(
                sequence_id=f"seq-{self._seq_counter:06d}",
                arm_id=cmd.arm_id,
                operator_id=cmd.operator_id,
                started_at_ms=now_ms,
                last_observed_ms=now_ms,
            )
            self._sequences.append(seq)
            self._open[key] = seq
        seq.last_observed_ms = now_ms
        seq.commands.append(SequenceEntry(command_id=cmd.id, targets=cmd.targets()))
        self._by_command[cmd.id] = seq
        return self._match_prefix(seq)

    def _match_prefix(self, seq: CommandSequence) -> PatternPrompt | None:
        prefix = seq.quantized()
        if len(prefix) < MIN_MATCH_PREFIX:
            return None
        best: LearnedPattern | None = None
        for pat in self._patterns:
            if pat.arm_id != seq.arm_id:
                continue
            if pat.pattern_id in seq.prompted_pattern_ids:
                continue
            if len(pat.canonical_commands) <= len(prefix):
                continue
            if pat.canonical_commands[: len(prefix)] != prefix:
                continue
            if best is None or _beats(pat, best):
                best = pat
        if best is None:
            return None
        seq.prompted_pattern_ids.append(best.pattern_id)
        remainder = tuple(
            quantized_to_config(qc) for qc in best.canonical_commands[len(prefix):]
        )
        return PatternPrompt(
            pattern_id=best.pattern_id,
            matched_prefix_len=len(prefix),
            remainder=remainder,
        )

    # -- outcomes and closing -------------------------------------------

    def record_outcome(self, command_id: str, outcome: str) -> list[LearnedPattern]:
        """Store a command's outcome; unknown ids are late/duplicate acks.

        A non-ok outcome poisons the enclosing sequence permanently. Returns
        patterns newly promoted when a late ack completes a closed sequence.
        """
        if outcome not in ("ok", "rejected", "fault"):
            raise ValueError(f"unknown outcome: {outcome!r}")
        seq = self._by_command.get(command_id)
        if seq is None:
            return []
        entry = next(e for e in seq.commands if e.command_id == command_id)
        if entry.outcome != "pending":
            return []
        entry.outcome = outcome
        if outcome != "ok":
            seq.poisoned = True
        if seq.closed and seq.fully_successful:
            return self.try_promote(seq.arm_id)
        return []

    def close_sequence(
        self, arm_id: str, operator_id: str, reason: str, now_ms: int
    ) -> CommandSequence | None:
        """Close the open sequence for (arm, operator); no-op when none open."""
        if reason not in CLOSE_REASONS:
            raise ValueError(f"unknown close reason: {reason!r}")
        seq = self._open.pop((arm_id, operator_id), None)
        if seq is None:
            return None
        seq.closed_at_ms = now_ms
        seq.close_reason = reason
        self.try_promote(arm_id)
        return seq

    def close_idle(self, now_ms: int) -> list[CommandSequence]:
        """Timer-tick path for idle-gap closes; returns the closed sequences."""
        stale = [
            seq
            for seq in self._open.values()
            if now_ms - seq.last_observed_ms > self.idle_gap_ms
        ]
        return [
            self.close_sequence(seq.arm_id, seq.operator_id, "idle_gap", now_ms)
            for seq in stale
        ]

    def open_sequence(self, arm_id: str, operator_id: str) -> CommandSequence | None:
        return self._open.get((arm_id, operator_id))

    def open_sequences_for_operator(self, operator_id: str) -> list[CommandSequence]:
        return [s for s in self._open.values() if s.operator_id == operator_id]

    # -- promotion -------------------------------------------------------

    def try_promote(self, arm_id: str) -> list[LearnedPattern]:
        """Promote every repeated, fully-successful sequence class for an arm.

        A class is the set of closed sequences with equal quantized command
        lists; it is promoted once its size reaches the threshold, with
        use_count starting at the class size. Promotion is monotone: existing
        patterns are never touched.
        """
        existing = {p.canonical_commands for p in self._patterns if p.arm_id == arm_id}
        classes: dict[tuple[QuantizedCommand, ...], list[CommandSequence]] = {}
        for seq in self._sequences:
            if seq.arm_id != arm_id or not seq.fully_successful:
                continue
            classes.setdefault(seq.quantized(), []).append(seq)
        promoted: list[LearnedPattern] = []
        for canonical, members in classes.items():
            if len(members) < self.promote_k or canonical in existing:
                continue
            self._pattern_counter += 1
            pattern = LearnedPattern(
                pattern_id=f"pat-{self._pattern_counter:04d}",
                arm_id=arm_id,
                canonical_commands=canonical,
                use_count=len(members),
                promoted_at_ms=max(s.closed_at_ms or 0 for s in members),
                source_sequence_ids=[s.sequence_id for s in members],
            )
            self._patterns.append(pattern)
            promoted.append(pattern)
        if promoted and self._on_promoted is not None:
            self._on_promoted(promoted)
        return promoted

    def get_pattern(self, pattern_id: str) -> LearnedPattern | None:
        return next((p for p in self._patterns if p.pattern_id == pattern_id), None)

    def mark_pattern_used(self, pattern_id: str) -> None:
        pattern = self.get_pattern(pattern_id)
        if pattern is None:
            raise KeyError(pattern_id)
        pattern.use_count += 1

    def patterns_for(self, arm_id: str) -> list[LearnedPattern]:
        return [p for p in self._patterns if p.arm_id == arm_id]

    def patterns_doc(self, arm_id: str) -> list[dict]:
        """Learned patterns for one arm in snapshot form (gateway payload)."""
        return [_pattern_obj(p) for p in self.patterns_for(arm_id)]

    @property
    def patterns(self) -> list[LearnedPattern]:
        return list(self._patterns)

    @property
    def sequences(self) -> list[CommandSequence]:
        return list(self._sequences)

    # -- persistence -----------------------------------------------------

    def stats(self) -> dict:
        return {
            "ongoing": len(self._sequences),
            "learning": len(self._patterns),
            "patterns": [
                {
                    "pattern_id": p.pattern_id,
                    "arm_id": p.arm_id,
                    "length": len(p.canonical_commands),
                    "use_count": p.use_count,
                }
                for p in self._patterns
            ],
        }

    def to_doc(self) -> dict:
        return {
            "root": {
                "ongoing": [_sequence_obj(s) for s in self._sequences],
                "learning": [_pattern_obj(p) for p in self._patterns],
            }
        }

    def to_snapshot_bytes(self) -> bytes:
        return (json.dumps(self.to_doc(), indent=2, ensure_ascii=False) + "\n").encode("utf-8")

    def snapshot(self, path: str) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_snapshot_bytes())

    def restore_doc(self, doc: dict) -> None:
        """Replace store contents from a snapshot document."""
        if not isinstance(doc, dict) or set(doc.keys()) != {"root"}:
            raise RestoreError("snapshot must have a single 'root' object")
        root = doc["root"]
        if not isinstance(root, dict) or set(root.keys()) != {"ongoing", "learning"}:
            raise RestoreError("root must have exactly the children 'ongoing' and 'learning'")
        sequences = [
            _sequence_from_obj(obj, f"ongoing[{i}]") for i, obj in enumerate(root["ongoing"])
        ]
        patterns = [
            _pattern_from_obj(obj, f"learning[{i}]") for i, obj in enumerate(root["learning"])
        ]
        self._sequences = sequences
        self._patterns = patterns
        self._open = {
            (s.arm_id, s.operator_id): s for s in sequences if not s.closed
        }
        self._by_command = {
            e.command_id: s for s in sequences for e in s.commands
        }
        self._seq_counter = _max_counter((s.sequence_id for s in sequences), "seq-")
        self._pattern_counter = _max_counter((p.pattern_id for p in patterns), "pat-")

    def restore(self, path: str) -> None:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise RestoreError(f"snapshot is not valid JSON: {exc}") from None
        self.restore_doc(doc)


def _beats(a: LearnedPattern, b: LearnedPattern) -> bool:
    """Prompt candidate ordering: longest, then earliest promotion, then id."""
    ka = (-len(a.canonical_commands), a.promoted_at_ms, a.pattern_id)
    kb = (-len(b.canonical_commands), b.promoted_at_ms, b.pattern_id)
    return ka < kb


def _max_counter(ids: Iterable[str], prefix: str) -> int:
    best = 0
    for value in ids:
        if value.startswith(prefix):
            try:
                best = max(best, int(value[len(prefix):]))
            except ValueError:
                continue
    return best


def _targets_obj(t: JointConfig) -> dict:
    return {name: getattr(t, name) for name in _TARGET_FIELDS}


def _sequence_obj(s: CommandSequence) -> dict:
    return {
        "sequence_id": s.sequence_id,
        "arm_id": s.arm_id,
        "operator_id": s.operator_id,
        "started_at_ms": s.started_at_ms,
        "last_observed_ms": s.last_observed_ms,
        "closed_at_ms": s.closed_at_ms,
        "close_reason": s.close_reason,
        "poisoned": s.poisoned,
        "prompted_pattern_ids": list(s.prompted_pattern_ids),
        "commands": [
            {
                "command_id": e.command_id,
                "outcome": e.outcome,
                "targets": _targets_obj(e.targets),
            }
            for e in s.commands
        ],
    }


def _pattern_obj(p: LearnedPattern) -> dict:
    return {
        "pattern_id": p.pattern_id,
        "arm_id": p.arm_id,
        "use_count": p.use_count,
        "promoted_at_ms": p.promoted_at_ms,
        "source_sequence_ids": list(p.source_sequence_ids),
        "commands": [_targets_obj(quantized_to_config(qc)) for qc in p.canonical_commands],
    }


def _require(obj: dict, name: str, kinds: tuple[type, ...], where: str):
    if not isinstance(obj, dict) or name not in obj:
        raise RestoreError(f"{where}: missing field {name}")
    value = obj[name]
    if isinstance(value, bool) and bool not in kinds:
        raise RestoreError(f"{where}: ill-typed field {name}")
    if not isinstance(value, kinds):
        raise RestoreError(f"{where}: ill-typed field {name}")
    return value


def _targets_from_obj(obj: dict, where: str) -> JointConfig:
    values = {}
    for name in _TARGET_FIELDS:
        values[name] = float(_require(obj, name, (int, float), where))
    return JointConfig(**values)


def _sequence_from_obj(obj: dict, where: str) -> CommandSequence:
    closed_at = obj.get("closed_at_ms") if isinstance(obj, dict) else None
    if closed_at is not None and not isinstance(closed_at, int):
        raise RestoreError(f"{where}: ill-typed field closed_at_ms")
    reason = obj.get("close_reason") if isinstance(obj, dict) else None
    if reason is not None and reason not in CLOSE_REASONS:
        raise RestoreError(f"{where}: unknown close_reason {reason!r}")
    if (closed_at is None) != (reason is None):
        raise RestoreError(f"{where}: closed_at_ms and close_reason must be set together")
    commands = []
    for i, entry in enumerate(_require(obj, "commands", (list,), where)):
        entry_where = f"{where}.commands[{i}]"
        outcome = _require(entry, "outcome", (str,), entry_where)
        if outcome not in OUTCOMES:
            raise RestoreError(f"{entry_where}: unknown outcome {outcome!r}")
        commands.append(
            SequenceEntry(
                command_id=_require(entry, "command_id", (str,), entry_where),
                targets=_targets_from_obj(
                    _require(entry, "targets", (dict,), entry_where), entry_where
                ),
                outcome=outcome,
            )
        )
    if closed_at is not None and not commands:
        raise RestoreError(f"{where}: closed sequence has no commands")
    prompted = _require(obj, "prompted_pattern_ids", (list,), where)
    if not all(isinstance(p, str) for p in prompted):
        raise RestoreError(f"{where}: ill-typed field prompted_pattern_ids")
    return CommandSequence(
        sequence_id=_require(obj, "sequence_id", (str,), where),
        arm_id=_require(obj, "arm_id", (str,), where),
        operator_id=_require(obj, "operator_id", (str,), where),
        started_at_ms=_require(obj, "started_at_ms", (int,), where),
        last_observed_ms=_require(obj, "last_observed_ms", (int,), where),
        commands=commands,
        closed_at_ms=closed_at,
        close_reason=reason,
        poisoned=_require(obj, "poisoned", (bool,), where),
        prompted_pattern_ids=list(prompted),
    )


def _pattern_from_obj(obj: dict, where: str) -> LearnedPattern:
    commands = _require(obj, "commands", (list,), where)
    if not commands:
        raise RestoreError(f"{where}: pattern has no commands")
    canonical = tuple(
        quantize_targets(_targets_from_obj(c, f"{where}.commands[{i}]"))
        for i, c in enumerate(commands)
    )
    sources = _require(obj, "source_sequence_ids", (list,), where)
    if not all(isinstance(s, str) for s in sources):
        raise RestoreError(f"{where}: ill-typed field source_sequence_ids")
    return LearnedPattern(
        pattern_id=_require(obj, "pattern_id", (str,), where),
        arm_id=_require(obj, "arm_id", (str,), where),
        canonical_commands=canonical,
        use_count=_require(obj, "use_count", (int,), where),
        promoted_at_ms=_require(obj, "promoted_at_ms", (int,), where),
        source_sequence_ids=list(sources),
    )
