"""Alarm records shared by the domains, the engine and the checkers."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any


class AlarmKind(enum.Enum):
    IllegalOpcodeSite = "IllegalOpcodeSite"
    MaybeDivZero = "MaybeDivZero"
    UnresolvedJump = "UnresolvedJump"
    WildStore = "WildStore"
    WildLoad = "WildLoad"
    SelfModification = "SelfModification"
    TypingViolationStore = "TypingViolationStore"
    MaybeNullDeref = "MaybeNullDeref"
    PrivilegedExitUnproven = "PrivilegedExitUnproven"
    BaseCaseViolation = "BaseCaseViolation"
    RecursionOrDepth = "RecursionOrDepth"


# kinds that make ARTE unprovable
ARTE_KINDS = frozenset({
    AlarmKind.IllegalOpcodeSite,
    AlarmKind.MaybeDivZero,
    AlarmKind.UnresolvedJump,
    AlarmKind.WildStore,
    AlarmKind.WildLoad,
    AlarmKind.SelfModification,
    AlarmKind.MaybeNullDeref,
    AlarmKind.RecursionOrDepth,
})


@dataclass(frozen=True)
class Alarm:
    kind: AlarmKind
    point: Any = None  # ProgramPoint, or an address for base-case alarms
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.kind.value} at {self.point}: {self.detail}"
