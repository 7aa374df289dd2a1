"""Four-Room constrained gridworld.

Feature layout for a map with ``C`` object classes (``d = C + 2``):

    [0, C)   one indicator per object class, set when an unpicked object is collected
    C        goal indicator
    C + 1    trap indicator, set when the agent moves onto a trap and it fires

Task rewards are ``phi . w_r`` and utilities ``phi . w_c`` so both are exactly
linear in the same feature.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from .core import TaskSpec, Transition

UP, DOWN, LEFT, RIGHT = range(4)
ACTIONS = (UP, DOWN, LEFT, RIGHT)
_DELTAS = ((-1, 0), (1, 0), (0, -1), (0, 1))

GOAL_REWARD = 2.0
TRAP_COST = -0.1

TRAP_ENTERED = "trap_entered"
GOAL_REACHED = "goal_reached"
OBJECT_PICKED = "object_picked"

Cell = tuple[int, int]


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class GridLayout:
    width: int
    height: int
    walls: frozenset
    start: Cell
    goal: Cell
    objects: tuple  # ((row, col), class_index) pairs
    traps: frozenset
    n_classes: int = 3
    trap_activation_prob: float = 1.0
    object_reward_prob: float = 1.0
    unsafe_regions: tuple = ()  # inclusive (row0, col0, row1, col1) boxes
    name: str = "layout"

    def __post_init__(self):
        free = lambda cell: self.in_bounds(cell) and cell not in self.walls
        for label, cell in (("start", self.start), ("goal", self.goal)):
            if not free(cell):
                raise LayoutError(f"{label} {cell} is outside the grid or on a wall")
        cells = [cell for cell, _ in self.objects]
        if len(set(cells)) != len(cells):
            raise LayoutError("object cells must be distinct")
        for cell, cls in self.objects:
            if not free(cell):
                raise LayoutError(f"object at {cell} is outside the grid or on a wall")
            if not 0 <= cls < self.n_classes:
                raise LayoutError(f"object at {cell} has class {cls}, expected < {self.n_classes}")
        for cell in self.traps:
            if not free(cell):
                raise LayoutError(f"trap at {cell} is outside the grid or on a wall")
        for p, label in ((self.trap_activation_prob, "trap_activation_prob"),
                         (self.object_reward_prob, "object_reward_prob")):
            if not 0.0 < p <= 1.0:
                raise LayoutError(f"{label} must lie in (0, 1], got {p}")

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

    @property
    def feature_dim(self) -> int:
        return self.n_classes + 2

    @property
    def goal_index(self) -> int:
        return self.n_classes

    @property
    def trap_index(self) -> int:
        return self.n_classes + 1

    def object_is_unsafe(self, index: int) -> bool:
        (r, c), _ = self.objects[index]
        if (r, c) in self.traps:
            return True
        return any(r0 <= r <= r1 and c0 <= c <= c1 for r0, c0, r1, c1 in self.unsafe_regions)

    def render(self, state: "GridState | None" = None) -> str:
        chars = [["." for _ in range(self.width)] for _ in range(self.height)]
        for r, c in self.walls:
            chars[r][c] = "#"
        for r, c in self.traps:
            chars[r][c] = "T"
        for i, ((r, c), cls) in enumerate(self.objects):
            if state is None or not state.picked >> i & 1:
                chars[r][c] = str(cls)
        chars[self.start[0]][self.start[1]] = "S"
        chars[self.goal[0]][self.goal[1]] = "G"
        if state is not None:
            chars[state.position[0]][state.position[1]] = "@"
        return "\n".join("".join(row) for row in chars)


class GridState(NamedTuple):
    """Agent cell plus a bitmask of collected objects (bit ``i`` = object ``i``)."""

    position: Cell
    picked: int

    def picked_bits(self, n_objects: int) -> tuple[int, ...]:
        return tuple(self.picked >> i & 1 for i in range(n_objects))


_LAYOUT_KEYS = {"version", "name", "approximate", "note", "grid", "object_classes",
                "trap_activation_prob", "object_reward_prob", "unsafe_regions"}


def load_layout(source) -> GridLayout:
    """Parse a layout document given as a path, a JSON string or a mapping."""
    where = "<mapping>"
    if isinstance(source, Mapping):
        doc = dict(source)
    else:
        text = str(source)
        if isinstance(source, Path) or not text.lstrip().startswith("{"):
            where = text
            try:
                text = Path(source).read_text()
            except OSError as exc:
                raise LayoutError(f"cannot read layout {source}: {exc}") from exc
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise LayoutError(f"{where}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise LayoutError(f"{where}: layout document must be an object")
    unknown = set(doc) - _LAYOUT_KEYS
    if unknown:
        raise LayoutError(f"{where}: unknown keys {sorted(unknown)}")
    grid = doc.get("grid")
    if not isinstance(grid, list) or not grid or not all(isinstance(row, str) for row in grid):
        raise LayoutError(f"{where}: 'grid' must be a non-empty list of strings")
    width = len(grid[0])
    n_classes = int(doc.get("object_classes", 3))
    if not 1 <= n_classes <= 10:
        raise LayoutError(f"{where}: object_classes must be between 1 and 10")
    walls, traps, objects = set(), set(), []
    start = goal = None
    for r, row in enumerate(grid):
        if len(row) != width:
            raise LayoutError(f"{where}: grid row {r} has length {len(row)}, expected {width}")
        for c, ch in enumerate(row):
            if ch == "#":
                walls.add((r, c))
            elif ch == "T":
                traps.add((r, c))
            elif ch == "S":
                if start is not None:
                    raise LayoutError(f"{where}: grid row {r}, column {c}: second start cell")
                start = (r, c)
            elif ch == "G":
                if goal is not None:
                    raise LayoutError(f"{where}: grid row {r}, column {c}: second goal cell")
                goal = (r, c)
            elif ch.isdigit():
                if int(ch) >= n_classes:
                    raise LayoutError(f"{where}: grid row {r}, column {c}: object class {ch} "
                                      f"but object_classes={n_classes}")
                objects.append(((r, c), int(ch)))
            elif ch != ".":
                raise LayoutError(f"{where}: grid row {r}, column {c}: unknown character {ch!r}")
    if start is None or goal is None:
        raise LayoutError(f"{where}: grid needs exactly one 'S' and one 'G'")
    regions = []
    for k, box in enumerate(doc.get("unsafe_regions", [])):
        if not (isinstance(box, list) and len(box) == 4):
            raise LayoutError(f"{where}: unsafe_regions[{k}] must be [row0, col0, row1, col1]")
        regions.append(tuple(int(v) for v in box))
    return GridLayout(
        width=width,
        height=len(grid),
        walls=frozenset(walls),
        start=start,
        goal=goal,
        objects=tuple(objects),
        traps=frozenset(traps),
        n_classes=n_classes,
        trap_activation_prob=float(doc.get("trap_activation_prob", 1.0)),
        object_reward_prob=float(doc.get("object_reward_prob", 1.0)),
        unsafe_regions=tuple(regions),
        name=str(doc.get("name", where)),
    )


def default_layout() -> GridLayout:
    text = resources.files("sftcop").joinpath("layouts/four_room.json").read_text()
    return load_layout(text)


def sample_task(rng: np.random.Generator, layout: GridLayout, threshold: float = -0.000005,
                gamma: float = 0.95, task_id=0) -> TaskSpec:
    """Draw object rewards uniformly from [-1, 1]; goal and trap weights are fixed."""
    d = layout.feature_dim
    w_r = np.zeros(d)
    w_r[:layout.n_classes] = rng.uniform(-1.0, 1.0, size=layout.n_classes)
    w_r[layout.goal_index] = GOAL_REWARD
    w_c = np.zeros(d)
    w_c[layout.trap_index] = TRAP_COST
    return TaskSpec(w_r, w_c, threshold=threshold, gamma=gamma, task_id=task_id)


def features(s: GridState, a: int, s_next: GridState, layout: GridLayout,
             trap_fired: bool = True, object_paid: bool = True) -> np.ndarray:
    """Feature vector of a transition; the two flags carry the stochastic outcomes."""
    phi = np.zeros(layout.feature_dim)
    pos = s_next.position
    for i, (cell, cls) in enumerate(layout.objects):
        if cell == pos and not s.picked >> i & 1 and object_paid:
            phi[cls] = 1.0
    if pos == layout.goal:
        phi[layout.goal_index] = 1.0
    if pos in layout.traps and pos != s.position and trap_fired:
        phi[layout.trap_index] = 1.0
    return phi


class GridWorld:
    """A layout bound to one task, with the lookup tables ``step`` needs."""

    n_actions = 4

    def __init__(self, layout: GridLayout, task: TaskSpec):
        if task.dim != layout.feature_dim:
            raise ValueError(f"task dimension {task.dim} does not match layout {layout.feature_dim}")
        self.layout = layout
        self.task = task
        self.feature_dim = layout.feature_dim
        self._moves = {}
        for r in range(layout.height):
            for c in range(layout.width):
                if (r, c) in layout.walls:
                    continue
                nxt = []
                for dr, dc in _DELTAS:
                    cell = (r + dr, c + dc)
                    nxt.append(cell if layout.in_bounds(cell) and cell not in layout.walls else (r, c))
                self._moves[(r, c)] = tuple(nxt)
        self._object_at = {cell: i for i, (cell, _) in enumerate(layout.objects)}
        self._unsafe = tuple(layout.object_is_unsafe(i) for i in range(len(layout.objects)))
        d = self.feature_dim
        self._unit = []
        for k in range(d):
            e = np.zeros(d)
            e[k] = 1.0
            e.flags.writeable = False
            self._unit.append(e)
        self._zero = np.zeros(d)
        self._zero.flags.writeable = False
        w_r, w_c = task.reward_weights, task.cost_weights
        self._r = [float(w_r[k]) for k in range(d)]
        self._c = [float(w_c[k]) for k in range(d)]

    def reset(self) -> GridState:
        return GridState(self.layout.start, 0)

    def step(self, state: GridState, action: int, rng: np.random.Generator | None = None) -> Transition:
        if action not in ACTIONS:
            raise ValueError(f"invalid action {action!r}")
        layout = self.layout
        pos = self._moves[state.position][action]
        picked = state.picked
        k = -1
        events = ()
        obj = self._object_at.get(pos)
        if obj is not None and not picked >> obj & 1:
            picked |= 1 << obj
            cls = layout.objects[obj][1]
            if layout.object_reward_prob >= 1.0 or rng.random() < layout.object_reward_prob:
                k = cls
            events = ((OBJECT_PICKED, cls, self._unsafe[obj], k >= 0),)
        elif pos == layout.goal:
            k = layout.goal_index
            events = ((GOAL_REACHED,),)
        elif pos in layout.traps and pos != state.position:
            if layout.trap_activation_prob >= 1.0 or rng.random() < layout.trap_activation_prob:
                k = layout.trap_index
                events = ((TRAP_ENTERED,),)
        nxt = GridState(pos, picked)
        if k < 0:
            return Transition(state, action, nxt, 0.0, 0.0, self._zero, False, events)
        # r and c are phi . w exactly: phi is one-hot here.
        return Transition(state, action, nxt, self._r[k], self._c[k], self._unit[k],
                          pos == layout.goal, events)


def reset(layout: GridLayout, task: TaskSpec) -> GridState:
    return GridState(layout.start, 0)


def step(s: GridState, a: int, layout: GridLayout, task: TaskSpec,
         rng: np.random.Generator | None = None) -> Transition:
    """One-off step; build a :class:`GridWorld` once for hot loops."""
    return GridWorld(layout, task).step(s, a, rng)
