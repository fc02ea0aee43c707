"""A small Craft grid world with a scripted expert.

Layout conventions: ``grid[y, x]`` holds an object-kind index or ``EMPTY``;
``y`` grows downward, so "up" is ``y - 1``.  The grid edge is the boundary
(no boundary cells are stored).  Moving sets the facing direction and steps
forward only if the target cell is free; ``use`` acts on the faced cell.

Observation layout (flat float vector):

* cell planes of an agent-centred ``(2r+1) x (2r+1)`` window in row-major
  ``(y, x, plane)`` order, planes = one-hot object kind (K of them) + a
  marker for cells outside the grid.  Partial mode uses radius ``r``; full
  mode uses ``r = max(W, H) - 1`` so the window covers the whole grid from
  any position (361 cells on 10 x 10);
* then inventory counts over ``INVENTORY`` (primitives and crafted
  products) and a 4-way facing one-hot (up, down, left, right).
"""
from __future__ import annotations

import base64
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

KINDS = ("wood", "grass", "iron", "toolshed", "workbench", "factory")
KIND_INDEX = {k: i for i, k in enumerate(KINDS)}
PRIMITIVES = ("wood", "grass", "iron")
STATIONS = ("toolshed", "workbench", "factory")
PRODUCTS = ("plank", "stick", "bed", "axe", "shears")
INVENTORY = PRIMITIVES + PRODUCTS
INV_INDEX = {k: i for i, k in enumerate(INVENTORY)}

# product -> (station, ingredients consumed)
RECIPES = {
    "plank": ("toolshed", ("wood",)),
    "stick": ("workbench", ("wood",)),
    "bed": ("workbench", ("plank", "grass")),
    "axe": ("toolshed", ("stick", "iron")),
    "shears": ("workbench", ("stick", "iron")),
}
EMPTY = -1
UNKNOWN = -2

ACTIONS = ("up", "down", "left", "right", "use")
UP, DOWN, LEFT, RIGHT, USE = range(5)
N_ACTIONS = len(ACTIONS)
DONE = N_ACTIONS  # index of the augmented done action
DIRS = {UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0)}

SCHEMA_VERSION = 1


class GenerationError(RuntimeError):
    pass


class ExpertError(RuntimeError):
    pass


@dataclass(frozen=True)
class Subtask:
    kind: str  # "get" or "make"
    target: str

    @property
    def name(self) -> str:
        return f"get {self.target}" if self.kind == "get" else f"make at {self.target}"


SUBTASKS = tuple([Subtask("get", p) for p in PRIMITIVES] + [Subtask("make", s) for s in STATIONS])
SUBTASK_INDEX = {s: i for i, s in enumerate(SUBTASKS)}

# product crafted at each make stage
TASK_PRODUCTS = {
    "makebed": (None, "plank", None, "bed"),
    "makeaxe": (None, "stick", None, "axe"),
    "makeshears": (None, "stick", None, "shears"),
}

TASKS = {
    "makebed": (Subtask("get", "wood"), Subtask("make", "toolshed"), Subtask("get", "grass"), Subtask("make", "workbench")),
    "makeaxe": (Subtask("get", "wood"), Subtask("make", "workbench"), Subtask("get", "iron"), Subtask("make", "toolshed")),
    "makeshears": (Subtask("get", "wood"), Subtask("make", "workbench"), Subtask("get", "iron"), Subtask("make", "workbench")),
}


def sketch_vector(sketch: Sequence[Subtask]) -> np.ndarray:
    """Concatenated one-hots over the subtask vocabulary."""
    vec = np.zeros(len(sketch) * len(SUBTASKS))
    for i, s in enumerate(sketch):
        vec[i * len(SUBTASKS) + SUBTASK_INDEX[s]] = 1.0
    return vec


def obs_dim(mode: str, width: int = 10, height: int = 10, radius: int = 2) -> int:
    k = len(KINDS)
    if mode == "full":
        radius = max(width, height) - 1
    return (2 * radius + 1) ** 2 * (k + 1) + len(INVENTORY) + 4


@dataclass
class CraftWorld:
    grid: np.ndarray
    pos: tuple[int, int]  # (x, y)
    facing: int
    task: str
    inventory: np.ndarray = field(default_factory=lambda: np.zeros(len(INVENTORY), dtype=int))
    stage: int = 0
    seed: int | None = None

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def sketch(self) -> tuple[Subtask, ...]:
        return TASKS[self.task]

    @property
    def done(self) -> bool:
        return self.stage >= len(self.sketch)

    @property
    def current(self) -> Subtask | None:
        return None if self.done else self.sketch[self.stage]

    def copy(self) -> "CraftWorld":
        return CraftWorld(self.grid.copy(), self.pos, self.facing, self.task, self.inventory.copy(), self.stage, self.seed)

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def faced_cell(self) -> tuple[int, int]:
        dx, dy = DIRS[self.facing]
        return self.pos[0] + dx, self.pos[1] + dy

    def step(self, action: int) -> tuple[bool, bool]:
        """Apply ``action``; returns ``(done, completed_subtask)``."""
        if action not in range(N_ACTIONS):
            raise ValueError(f"invalid action {action}")
        completed = False
        if action == USE:
            completed = self._use()
        else:
            self.facing = action
            dx, dy = DIRS[action]
            nx, ny = self.pos[0] + dx, self.pos[1] + dy
            if self.in_bounds(nx, ny) and self.grid[ny, nx] == EMPTY:
                self.pos = (nx, ny)
        return self.done, completed

    def _use(self) -> bool:
        x, y = self.faced_cell()
        if not self.in_bounds(x, y) or self.grid[y, x] == EMPTY:
            return False
        kind = KINDS[self.grid[y, x]]
        cur = self.current
        if kind in PRIMITIVES:
            self.grid[y, x] = EMPTY
            self.inventory[INV_INDEX[kind]] += 1
            if cur is not None and cur == Subtask("get", kind):
                self.stage += 1
                return True
            return False
        if cur is not None and cur == Subtask("make", kind):
            product = TASK_PRODUCTS[self.task][self.stage]
            station, needs = RECIPES[product]
            idx = [INV_INDEX[n] for n in needs]
            if station == kind and all(self.inventory[i] > 0 for i in idx):
                for i in idx:
                    self.inventory[i] -= 1
                self.inventory[INV_INDEX[product]] += 1
                self.stage += 1
                return True
        return False

    def observe(self, mode: str = "full", radius: int = 2) -> np.ndarray:
        k = len(KINDS)
        if mode == "full":
            radius = max(self.width, self.height) - 1
        elif mode != "partial":
            raise ValueError(f"unknown observation mode {mode!r}")
        size = 2 * radius + 1
        # pad with an out-of-bounds marker so any window is a plain slice
        padded = np.zeros((self.height + 2 * radius, self.width + 2 * radius, k + 1))
        padded[..., k] = 1.0
        inner = padded[radius : radius + self.height, radius : radius + self.width]
        inner[..., k] = 0.0
        ys, xs = np.nonzero(self.grid != EMPTY)
        inner[ys, xs, self.grid[ys, xs]] = 1.0
        x0, y0 = self.pos
        planes = padded[y0 : y0 + size, x0 : x0 + size]
        facing = np.zeros(4)
        facing[self.facing] = 1.0
        return np.concatenate([planes.reshape(-1), self.inventory.astype(float), facing])


def generate_world(
    task: str, seed: int, width: int = 10, height: int = 10, per_primitive: int = 2, max_tries: int = 100
) -> CraftWorld:
    """Random placement of primitives and stations, deterministic in ``seed``."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {sorted(TASKS)}")
    rng = np.random.default_rng(seed)
    n_objects = per_primitive * len(PRIMITIVES) + len(STATIONS)
    if n_objects + 1 > width * height:
        raise GenerationError("grid too small for the object set")
    for _ in range(max_tries):
        grid = np.full((height, width), EMPTY, dtype=int)
        cells = rng.permutation(width * height)[: n_objects + 1]
        kinds = [KIND_INDEX[p] for p in PRIMITIVES for _ in range(per_primitive)] + [KIND_INDEX[s] for s in STATIONS]
        for c, kind in zip(cells[:-1], kinds):
            grid[c // width, c % width] = kind
        agent = int(cells[-1])
        world = CraftWorld(grid, (agent % width, agent // width), int(rng.integers(4)), task, seed=seed)
        if _all_targets_reachable(world):
            return world
    raise GenerationError(f"could not place a solvable {task} world for seed {seed}")


def _all_targets_reachable(world: CraftWorld) -> bool:
    needed = {KIND_INDEX[s.target] for s in world.sketch}
    dist = _free_distances(world.grid, world.pos)
    for kind in needed:
        ok = False
        for y, x in zip(*np.nonzero(world.grid == kind)):
            for dx, dy in DIRS.values():
                if (x + dx, y + dy) in dist:
                    ok = True
        if not ok:
            return False
    return True


def _free_distances(grid: np.ndarray, start: tuple[int, int]) -> dict[tuple[int, int], int]:
    h, w = grid.shape
    dist = {start: 0}
    queue = deque([start])
    while queue:
        x, y = queue.popleft()
        for dx, dy in DIRS.values():
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and grid[ny, nx] == EMPTY and (nx, ny) not in dist:
                dist[(nx, ny)] = dist[(x, y)] + 1
                queue.append((nx, ny))
    return dist


# -- expert --------------------------------------------------------------
def plan_moves(grid: np.ndarray, pos, facing: int, is_goal, passable) -> list[int] | None:
    """Shortest move sequence over (position, facing) ending in a goal state.

    ``is_goal(x, y, facing)`` tests a state; ``passable(x, y)`` says whether the
    agent may enter a cell.  Moving toward a blocked cell only turns the agent.
    """
    h, w = grid.shape
    start = (pos[0], pos[1], facing)
    if is_goal(*start):
        return []
    parent = {start: None}
    queue = deque([start])
    while queue:
        state = queue.popleft()
        x, y, _ = state
        for a in (UP, DOWN, LEFT, RIGHT):
            dx, dy = DIRS[a]
            nx, ny = x + dx, y + dy
            nxt = (nx, ny, a) if 0 <= nx < w and 0 <= ny < h and passable(nx, ny) else (x, y, a)
            if nxt in parent:
                continue
            parent[nxt] = (state, a)
            if is_goal(*nxt):
                moves = []
                cur = nxt
                while parent[cur] is not None:
                    cur, act = parent[cur]
                    moves.append(act)
                return moves[::-1]
            queue.append(nxt)
    return None


def _facing_kind(grid: np.ndarray, kind: int):
    h, w = grid.shape

    def is_goal(x, y, facing):
        dx, dy = DIRS[facing]
        fx, fy = x + dx, y + dy
        return 0 <= fx < w and 0 <= fy < h and grid[fy, fx] == kind

    return is_goal


class Expert:
    """Scripted demonstrator.

    Full mode plans a shortest path over the true grid.  Partial mode keeps a
    map of every cell seen so far; while the current target is absent from
    that map it sweeps the grid row by row (bottom row first, each row left to
    right), then falls back to shortest-path planning over the map with
    unseen cells assumed free.
    """

    def __init__(self, mode: str = "full", radius: int = 2):
        if mode not in ("full", "partial"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.radius = radius
        self.known: np.ndarray | None = None
        self.waypoints: list[tuple[int, int]] = []

    def reset(self, world: CraftWorld) -> None:
        self.known = np.full(world.grid.shape, UNKNOWN, dtype=int)
        self.waypoints = sweep_waypoints(world.width, world.height, self.radius)
        self._look(world)

    def _look(self, world: CraftWorld) -> None:
        r = self.radius
        x0, y0 = world.pos
        ys = slice(max(0, y0 - r), min(world.height, y0 + r + 1))
        xs = slice(max(0, x0 - r), min(world.width, x0 + r + 1))
        self.known[ys, xs] = world.grid[ys, xs]

    def act(self, world: CraftWorld) -> int:
        if self.known is None:
            self.reset(world)
        sub = world.current
        if sub is None:
            raise ExpertError("episode already finished")
        target = KIND_INDEX[sub.target]
        if self.mode == "full":
            grid = world.grid
            passable = lambda x, y: grid[y, x] == EMPTY  # noqa: E731
        else:
            self._look(world)
            grid = self.known
            passable = lambda x, y: grid[y, x] in (EMPTY, UNKNOWN)  # noqa: E731
            if not np.any(grid == target):
                return self._explore(world, passable)
        is_goal = _facing_kind(grid, target)
        if is_goal(world.pos[0], world.pos[1], world.facing):
            return USE
        moves = plan_moves(grid, world.pos, world.facing, is_goal, passable)
        if not moves:
            raise ExpertError(f"no path to {sub.target} (seed {world.seed})")
        return moves[0]

    def _explore(self, world: CraftWorld, passable) -> int:
        while self.waypoints:
            wx, wy = self.waypoints[0]
            if world.pos == (wx, wy) or self.known[wy, wx] not in (EMPTY, UNKNOWN):
                self.waypoints.pop(0)
                continue
            goal = lambda x, y, f: (x, y) == (wx, wy)  # noqa: E731
            moves = plan_moves(self.known, world.pos, world.facing, goal, passable)
            if moves:
                return moves[0]
            self.waypoints.pop(0)
        raise ExpertError(f"exploration finished without finding {world.current.target} (seed {world.seed})")


def sweep_waypoints(width: int, height: int, radius: int) -> list[tuple[int, int]]:
    span = 2 * radius + 1
    ys = list(range(max(height - 1 - radius, 0), -1, -span))
    if ys[-1] - radius > 0:
        ys.append(min(radius, height - 1))
    left, right = min(radius, width - 1), max(width - 1 - radius, 0)
    points = []
    for y in ys:
        points.append((left, y))
        if right != left:
            points.append((right, y))
    return points


# -- demonstrations ------------------------------------------------------
@dataclass
class Demo:
    """Raw expert rollout before done-augmentation."""

    task: str
    seed: int
    mode: str
    observations: np.ndarray  # (T, obs_dim)
    actions: np.ndarray  # (T,)
    gt_boundaries: list[int]
    terminal_obs: np.ndarray

    @property
    def sketch(self) -> tuple[Subtask, ...]:
        return TASKS[self.task]


def rollout_expert(world: CraftWorld, mode: str = "full", radius: int = 2, max_steps: int = 500) -> Demo:
    world = world.copy()
    expert = Expert(mode, radius)
    expert.reset(world)
    obs, acts, bounds = [], [], []
    for t in range(max_steps):
        o = world.observe(mode, radius)
        a = expert.act(world)
        obs.append(o)
        acts.append(a)
        done, completed = world.step(a)
        if completed:
            bounds.append(t)
        if done:
            return Demo(world.task, world.seed, mode, np.array(obs), np.array(acts), bounds, world.observe(mode, radius))
    raise ExpertError(f"expert exceeded {max_steps} steps (seed {world.seed})")


def generate_dataset(
    tasks: Iterable[str], episodes_per_task: int, mode: str = "full", seed: int = 0, width: int = 10, height: int = 10, radius: int = 2
) -> list[Demo]:
    """Expert demonstrations; world seeds are drawn from ``seed``.

    A world on which the expert fails is replaced by the next drawn seed.
    """
    if episodes_per_task < 1:
        raise ValueError("episodes_per_task must be >= 1")
    rng = np.random.default_rng(seed)
    demos = []
    for task in tasks:
        made = 0
        while made < episodes_per_task:
            world_seed = int(rng.integers(2**31))
            try:
                world = generate_world(task, world_seed, width, height)
                demos.append(rollout_expert(world, mode, radius))
            except (GenerationError, ExpertError):
                continue
            made += 1
    return demos


def _pack(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode()


def _unpack(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).astype(np.float64)


def write_dataset_jsonl(path, demos: Sequence[Demo], encoding: str = "b64") -> None:
    """One JSON object per trajectory.

    Fields: ``schema_version``, ``task``, ``sketch`` (subtask names), ``seed``,
    ``mode``, ``obs_dim``, ``obs_encoding`` (``"b64"``: base64 of packed
    little-endian float64 row-major (T, obs_dim); ``"array"``: nested lists),
    ``observations``, ``actions``, ``gt_boundaries``, ``terminal_obs`` (same
    encoding, one row).
    """
    if encoding not in ("b64", "array"):
        raise ValueError(f"unknown encoding {encoding!r}")
    enc = _pack if encoding == "b64" else (lambda a: np.asarray(a).tolist())
    with open(path, "w") as fh:
        for d in demos:
            rec = {
                "schema_version": SCHEMA_VERSION,
                "task": d.task,
                "sketch": [s.name for s in d.sketch],
                "seed": d.seed,
                "mode": d.mode,
                "obs_dim": int(d.observations.shape[1]),
                "obs_encoding": encoding,
                "observations": enc(d.observations),
                "actions": [int(a) for a in d.actions],
                "gt_boundaries": [int(b) for b in d.gt_boundaries],
                "terminal_obs": enc(d.terminal_obs),
            }
            fh.write(json.dumps(rec) + "\n")


def read_dataset_jsonl(path) -> list[Demo]:
    demos = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("schema_version") != SCHEMA_VERSION:
                raise ValueError(f"unsupported dataset schema version {rec.get('schema_version')}")
            n, dim = len(rec["actions"]), rec["obs_dim"]
            if rec["obs_encoding"] == "b64":
                obs, term = _unpack(rec["observations"], (n, dim)), _unpack(rec["terminal_obs"], (dim,))
            else:
                obs, term = np.array(rec["observations"], dtype=float), np.array(rec["terminal_obs"], dtype=float)
            demos.append(
                Demo(rec["task"], rec["seed"], rec["mode"], obs, np.array(rec["actions"], dtype=int), list(rec["gt_boundaries"]), term)
            )
    return demos
