"""Damage classes: enumeration, canonical ids and the partial one-hot encoding.

A damage class is at most two (limb, type) assignments on distinct limbs.
Types are numbered from 1; type 1 is a jammed joint and type 2 a missing toe.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache
from math import comb

import numpy as np

from .errors import InvalidInputError

MAX_SIMULTANEOUS = 2


class DamageType(IntEnum):
    JAM = 1
    MISSING_TOE = 2

    @property
    def label(self) -> str:
        return "jam" if self is DamageType.JAM else "missing_toe"

    @classmethod
    def from_label(cls, label: str) -> "DamageType":
        try:
            return {"jam": cls.JAM, "missing_toe": cls.MISSING_TOE}[label]
        except KeyError:
            raise InvalidInputError(f"unknown damage type {label!r}") from None


@dataclass(frozen=True, order=True)
class Assignment:
    limb: int
    kind: int
    # jammed joints collapse to one representative joint per limb
    joint: int = 0


@dataclass(frozen=True)
class DamageClass:
    class_id: int
    assignments: tuple[Assignment, ...] = ()

    @property
    def is_healthy(self) -> bool:
        return not self.assignments

    @property
    def group(self) -> str:
        return ("healthy", "single", "multi")[len(self.assignments)]

    def to_json(self) -> dict:
        return {
            "class_id": self.class_id,
            "assignments": [
                {"limb": a.limb, "type": DamageType(a.kind).label} for a in self.assignments
            ],
        }

    @classmethod
    def from_json(cls, doc: dict, n: int, k: int = 2) -> "DamageClass":
        assignments = tuple(
            Assignment(int(a["limb"]), int(DamageType.from_label(a["type"])))
            for a in doc.get("assignments", [])
        )
        cid = id_from_assignments(assignments, n, k)
        if "class_id" in doc and int(doc["class_id"]) != cid:
            raise InvalidInputError(
                f"class_id {doc['class_id']} does not match assignments (expected {cid})"
            )
        return DamageClass(cid, assignments)

    def __str__(self) -> str:
        if self.is_healthy:
            return "healthy"
        return "+".join(f"{DamageType(a.kind).label}@{a.limb}" for a in self.assignments)


def count_classes(n: int, k: int) -> int:
    """Number of damage classes for ``n`` limbs and ``k`` damage types."""
    if n < 1 or k < 0:
        raise InvalidInputError("need n >= 1 and k >= 0")
    return sum(comb(n, i) * k**i for i in range(MAX_SIMULTANEOUS + 1))


@lru_cache(maxsize=None)
def _canonical(n: int, k: int) -> tuple[tuple[tuple[int, int], ...], ...]:
    order: list[tuple[tuple[int, int], ...]] = [()]
    for limb in range(n):
        for t in range(1, k + 1):
            order.append(((limb, t),))
    for la, lb in itertools.combinations(range(n), 2):
        for ta in range(1, k + 1):
            for tb in range(1, k + 1):
                order.append(((la, ta), (lb, tb)))
    return tuple(order)


@lru_cache(maxsize=None)
def _index(n: int, k: int) -> dict:
    return {key: i for i, key in enumerate(_canonical(n, k))}


def class_from_id(class_id: int, n: int, k: int = 2) -> DamageClass:
    table = _canonical(n, k)
    if not 0 <= class_id < len(table):
        raise InvalidInputError(f"class id {class_id} outside [0, {len(table)})")
    return DamageClass(class_id, tuple(Assignment(limb, t) for limb, t in table[class_id]))


def id_from_assignments(assignments, n: int, k: int = 2) -> int:
    key = tuple(sorted((a.limb, a.kind) for a in assignments))
    limbs = [limb for limb, _ in key]
    if len(set(limbs)) != len(limbs):
        raise InvalidInputError("only one damage per limb is allowed")
    if len(key) > MAX_SIMULTANEOUS:
        raise InvalidInputError("at most two simultaneous damages are allowed")
    for limb, t in key:
        if not 0 <= limb < n:
            raise InvalidInputError(f"limb {limb} outside [0, {n})")
        if not 1 <= t <= k:
            raise InvalidInputError(f"damage type {t} outside [1, {k}]")
    return _index(n, k)[key]


def id_from_class(damage: DamageClass, n: int, k: int = 2) -> int:
    return id_from_assignments(damage.assignments, n, k)


def all_classes(n: int, k: int = 2) -> list[DamageClass]:
    return [class_from_id(i, n, k) for i in range(count_classes(n, k))]


def encode(damage: DamageClass, n: int) -> np.ndarray:
    vec = np.zeros(2 * n)
    for a in damage.assignments:
        if not 0 <= a.limb < n:
            raise InvalidInputError(f"limb {a.limb} outside [0, {n})")
        vec[2 * a.limb + (a.kind - 1)] = 1.0
    return vec


def decode(encoding, n: int) -> DamageClass:
    enc = np.asarray(encoding, dtype=float)
    if enc.shape != (2 * n,):
        raise InvalidInputError(f"encoding must have length {2 * n}")
    if not np.all((enc == 0) | (enc == 1)):
        raise InvalidInputError("encoding entries must be 0 or 1")
    assignments = []
    for limb in range(n):
        pair = enc[2 * limb : 2 * limb + 2]
        if pair[0] and pair[1]:
            raise InvalidInputError(f"limb {limb} carries both damage types")
        if pair[0]:
            assignments.append(Assignment(limb, DamageType.JAM))
        elif pair[1]:
            assignments.append(Assignment(limb, DamageType.MISSING_TOE))
    return DamageClass(id_from_assignments(assignments, n), tuple(assignments))
