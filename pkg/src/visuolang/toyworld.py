"""Deterministic synthetic tabletop: colored blocks on an integer grid, a
schematic two-segment arm, scripted verb trajectories, frame rasterization,
the group/ratio train-test splits, and the on-disk episode format.

Episodes carry T+1 frames and joint vectors (index 0 is the initial state)
plus the one-hot sentence label.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import Rng
from .propriolang import Vocabulary

COLORS = ["red", "green", "blue", "purple", "yellow"]
RGB = {
    "red": (1.0, 0.1, 0.1),
    "green": (0.1, 0.9, 0.1),
    "blue": (0.15, 0.25, 1.0),
    "purple": (0.6, 0.1, 0.8),
    "yellow": (1.0, 0.9, 0.1),
}
VERBS = ["grasp", "move-left", "move-right", "move-front", "move-back",
         "put-on-green", "put-on-blue", "put-on-yellow"]
STACK_BASES = {"put-on-green": "green", "put-on-blue": "blue",
               "put-on-yellow": "yellow"}
MOVE_DELTAS = {"move-left": (-2, 0), "move-right": (2, 0),
               "move-front": (0, 2), "move-back": (0, -2)}

GROUPS = {
    "A": (COLORS, VERBS),                    # 5 x 8
    "B": (COLORS, VERBS[:6]),                # 5 x 6
    "C": (COLORS, ["grasp", "move-left", "put-on-green"]),  # 5 x 3
    "D": (["red", "green", "blue"],
          ["grasp", "move-left", "put-on-green"]),          # 3 x 3
}
TRAIN_COUNTS = {
    "A": {1: 32, 2: 24, 3: 16},
    "B": {1: 24, 2: 18, 3: 12},
    "C": {1: 12, 2: 9, 3: 6},
    "D": {1: 7, 2: 6, 3: 3},
}


@dataclass(frozen=True)
class TaskSpec:
    verb: str
    noun: str

    def __post_init__(self):
        if self.verb not in VERBS:
            raise ValueError(f"unknown verb {self.verb!r}")
        if self.noun not in COLORS:
            raise ValueError(f"unknown noun {self.noun!r}")

    def sentence_tokens(self):
        if self.verb == "grasp":
            return ["grasp", self.noun, "."]
        if self.verb in MOVE_DELTAS:
            direction = self.verb.split("-")[1]
            return ["move", self.noun, direction, "."]
        return ["put", self.noun, "on", STACK_BASES[self.verb], "."]


@dataclass
class WorldConfig:
    image_size: int = 16
    grid: int = 10              # 10x10 for training positions, 8x8 for test
    test_grid: int = 8
    joints: int = 4
    t_base: int = 20            # steps per episode, jittered +-t_jitter
    t_jitter: int = 2
    block_px: int = 2
    noise_sigma: float = 0.0    # optional pixel noise on rendered frames

    def __post_init__(self):
        if self.joints < 4:
            raise ValueError("the arm encoding needs at least 4 joints "
                             "(x, y, lift, aperture)")


@dataclass
class WorldState:
    positions: dict            # color -> (gx, gy) integer grid cell
    grid: int
    gripper: np.ndarray        # (x, y) in [0, 1] workspace units
    closed: bool = False
    carried: str = None

    def validate(self):
        seen = set()
        for color, (gx, gy) in self.positions.items():
            if not (0 <= gx < self.grid and 0 <= gy < self.grid):
                raise ValueError(
                    f"{color} block at {(gx, gy)} outside {self.grid}x"
                    f"{self.grid} grid")
            if (gx, gy) in seen:
                raise ValueError(f"overlapping blocks at {(gx, gy)}")
            seen.add((gx, gy))


@dataclass
class Episode:
    frames: np.ndarray         # [T+1, 3, H, W] in [0, 1]
    joints: np.ndarray         # [T+1, J] in [0, 1]
    sentence: np.ndarray       # [5, vocab] one-hot rows
    tokens: list
    task: TaskSpec
    positions: dict
    seed: int
    tag: str = "train"


# -- rasterization ------------------------------------------------------------------

def _cell_to_px(cell, grid, n):
    """Center pixel of a grid cell; the workspace fills the frame."""
    return (np.asarray(cell, dtype=np.float64) + 0.5) / grid * n


def _draw_square(img, cx, cy, half, color):
    n = img.shape[-1]
    x0, x1 = int(round(cx - half)), int(round(cx + half))
    y0, y1 = int(round(cy - half)), int(round(cy + half))
    x0, x1 = max(x0, 0), min(x1, n)
    y0, y1 = max(y0, 0), min(y1, n)
    if x1 > x0 and y1 > y0:
        for c in range(3):
            img[c, y0:y1, x0:x1] = color[c]


def _draw_segment(img, p0, p1, color):
    steps = int(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1])) * 2) + 2
    n = img.shape[-1]
    for s in range(steps + 1):
        f = s / steps
        x = int(round(p0[0] + f * (p1[0] - p0[0])))
        y = int(round(p0[1] + f * (p1[1] - p0[1])))
        if 0 <= x < n and 0 <= y < n:
            for c in range(3):
                img[c, y, x] = color[c]


def render_frame(world: WorldState, config: WorldConfig, rng=None):
    """Flat background, colored block squares, a two-segment arm from the
    top-center base to the gripper. Deterministic unless pixel noise is on."""
    n = config.image_size
    img = np.full((3, n, n), 0.1)
    half = config.block_px / 2.0
    for color, cell in world.positions.items():
        px = _cell_to_px(cell, world.grid, n)
        _draw_square(img, px[0], px[1], half, RGB[color])
    # arm: base at top-center, elbow halfway with a sideways offset
    gx, gy = world.gripper[0] * (n - 1), world.gripper[1] * (n - 1)
    base = (n / 2.0, 0.0)
    elbow = ((base[0] + gx) / 2.0 + 0.15 * n, (base[1] + gy) / 2.0)
    grey = (0.55, 0.55, 0.55)
    _draw_segment(img, base, elbow, grey)
    _draw_segment(img, elbow, (gx, gy), grey)
    tip = 0.95 if not world.closed else 0.7
    _draw_square(img, gx, gy, 0.9, (tip, tip, tip))
    if config.noise_sigma > 0 and rng is not None:
        img = img + rng.normal(img.shape) * config.noise_sigma
    return np.clip(img, 0.0, 1.0)


# -- scripted controller ---------------------------------------------------------------

def _joint_vector(config, gripper, lift, closed):
    """Normalized joint encoding: gripper x, y, lift height, hand aperture;
    extra joints (if configured) carry smooth redundant readouts."""
    j = np.empty(config.joints)
    j[0] = gripper[0]
    j[1] = gripper[1]
    j[2] = lift
    j[3] = 0.1 if closed else 0.9
    for k in range(4, config.joints):
        j[k] = 0.5 + 0.5 * np.sin(np.pi * (gripper[0] + gripper[1]) / (k - 2))
    return np.clip(j, 0.0, 1.0)


def _destination(task: TaskSpec, world: WorldState):
    src = np.array(world.positions[task.noun], dtype=np.int64)
    if task.verb == "grasp":
        return src
    if task.verb in MOVE_DELTAS:
        dst = src + MOVE_DELTAS[task.verb]
        if not (0 <= dst[0] < world.grid and 0 <= dst[1] < world.grid):
            raise ValueError(
                f"{task.verb} on {task.noun} at {tuple(src)} leaves the grid")
        return dst
    base = STACK_BASES[task.verb]
    if base not in world.positions:
        raise ValueError(f"{task.verb} needs a {base} block on the table")
    return np.array(world.positions[base], dtype=np.int64)


def generate_episode(task: TaskSpec, positions: dict, seed: int,
                     config: WorldConfig, grid=None, tag="train") -> Episode:
    """Scripted approach -> grasp -> transport -> release trajectory,
    rendered at every step. Deterministic in (task, positions, seed)."""
    grid = grid if grid is not None else config.grid
    if task.noun not in positions:
        raise ValueError(f"no {task.noun} block in the layout")
    rng = Rng(seed)
    world = WorldState(positions={c: tuple(p) for c, p in positions.items()},
                       grid=grid, gripper=np.array([0.5, 0.05]))
    world.validate()
    src_cell = np.array(world.positions[task.noun], dtype=np.int64)
    dst_cell = _destination(task, world)

    t_len = config.t_base + int(rng.integers(-config.t_jitter,
                                             config.t_jitter + 1))
    src = (src_cell + 0.5) / grid
    dst = (dst_cell + 0.5) / grid
    home = world.gripper.copy()

    # phase schedule over T steps: approach, descend+close, transport, settle
    n_approach = max(t_len // 3, 2)
    n_grasp = max(t_len // 6, 1)
    n_move = max(t_len // 3, 2)
    n_settle = t_len - n_approach - n_grasp - n_move

    frames, joints = [], []
    noise_rng = rng.spawn(1)

    def snap(lift, closed):
        frames.append(render_frame(world, config, noise_rng))
        joints.append(_joint_vector(config, world.gripper, lift, closed))

    snap(lift=1.0, closed=False)
    for s in range(1, n_approach + 1):
        f = s / n_approach
        world.gripper = home + f * (src - home)
        snap(lift=1.0 - 0.5 * f, closed=False)
    for s in range(1, n_grasp + 1):
        f = s / n_grasp
        world.closed = f >= 0.5
        if world.closed:
            world.carried = task.noun
        snap(lift=0.5 - 0.3 * f, closed=world.closed)
    for s in range(1, n_move + 1):
        f = s / n_move
        world.gripper = src + f * (dst - src)
        carried_cell = src_cell + f * (dst_cell - src_cell)
        world.positions[task.noun] = tuple(carried_cell)
        snap(lift=0.2 + 0.2 * np.sin(np.pi * f), closed=True)
    world.positions[task.noun] = tuple(int(x) for x in dst_cell)
    for s in range(1, n_settle + 1):
        release = task.verb != "grasp"
        if release and s >= max(n_settle // 2, 1):
            world.closed = False
            world.carried = None
        snap(lift=0.2 + (0.3 * s / n_settle if release else 0.0),
             closed=world.closed)

    vocab = Vocabulary.load()
    tokens = task.sentence_tokens()
    return Episode(frames=np.stack(frames), joints=np.stack(joints),
                   sentence=vocab.encode_sentence(tokens), tokens=tokens,
                   task=task, positions={c: tuple(int(v) for v in p)
                                         for c, p in positions.items()},
                   seed=seed, tag=tag)


def sample_positions(rng, grid, margin=2, colors=COLORS):
    """Non-overlapping block layout keeping a margin so every scripted verb
    stays on the grid."""
    lo, hi = margin, grid - margin
    if (hi - lo) ** 2 < len(colors):
        raise ValueError(f"grid {grid} too small for {len(colors)} blocks")
    cells = [(x, y) for x in range(lo, hi) for y in range(lo, hi)]
    order = np.arange(len(cells))
    rng.shuffle(order)
    return {c: cells[order[i]] for i, c in enumerate(colors)}


# -- splits --------------------------------------------------------------------------

@dataclass
class SplitManifest:
    group: str
    ratio_index: int
    seed: int
    train: list = field(default_factory=list)    # TaskSpec
    test_uc: list = field(default_factory=list)  # held-out TaskSpec


def build_splits(group: str, ratio_index: int, seed: int) -> SplitManifest:
    """Seeded held-out choice; every verb and noun keeps at least one
    training combination (held-out cells are scattered, never a full row or
    column)."""
    if group not in GROUPS:
        raise ValueError(f"unknown group {group!r}; choose from {sorted(GROUPS)}")
    if ratio_index not in TRAIN_COUNTS[group]:
        raise ValueError(f"ratio index must be 1, 2 or 3, got {ratio_index}")
    nouns, verbs = GROUPS[group]
    n_train = TRAIN_COUNTS[group][ratio_index]
    combos = [TaskSpec(v, n) for v in verbs for n in nouns]
    if n_train < max(len(verbs), len(nouns)):
        raise ValueError(
            f"{group}{ratio_index}: cannot cover {len(verbs)} verbs and "
            f"{len(nouns)} nouns with {n_train} training combinations")
    rng = Rng(seed)
    # cover every verb with a random noun, then every uncovered noun
    train = set()
    noun_order = list(nouns)
    rng.shuffle(noun_order)
    for i, v in enumerate(verbs):
        train.add(TaskSpec(v, noun_order[i % len(noun_order)]))
    missing = [n for n in nouns if not any(t.noun == n for t in train)]
    verb_order = list(verbs)
    rng.shuffle(verb_order)
    for i, n in enumerate(missing):
        train.add(TaskSpec(verb_order[i % len(verb_order)], n))
    if len(train) > n_train:
        raise ValueError(f"{group}{ratio_index}: coverage needs {len(train)} "
                         f"combinations but only {n_train} allowed")
    rest = [c for c in combos if c not in train]
    order = np.arange(len(rest))
    rng.shuffle(order)
    for i in order:
        if len(train) >= n_train:
            break
        train.add(rest[i])
    held = [c for c in combos if c not in train]
    key = lambda t: (VERBS.index(t.verb), COLORS.index(t.noun))
    return SplitManifest(group=group, ratio_index=ratio_index, seed=seed,
                         train=sorted(train, key=key),
                         test_uc=sorted(held, key=key))


def generate_dataset(manifest: SplitManifest, config: WorldConfig, seed: int,
                     per_combo_train=3, per_combo_test=1):
    """Episodes for the three evaluation pools: training combinations at
    training-grid positions, the same combinations at unseen test-grid
    positions (U-P), and held-out combinations at test-grid positions (U-C)."""
    rng = Rng(seed)
    pools = {"train": [], "up": [], "uc": []}
    for i, task in enumerate(manifest.train):
        for j in range(per_combo_train):
            sub = rng.spawn(i * 1000 + j)
            pos = sample_positions(sub, config.grid)
            pools["train"].append(generate_episode(
                task, pos, seed=int(sub.integers(0, 2 ** 31)), config=config,
                grid=config.grid, tag="train"))
        for j in range(per_combo_test):
            sub = rng.spawn(500_000 + i * 1000 + j)
            pos = sample_positions(sub, config.test_grid)
            pools["up"].append(generate_episode(
                task, pos, seed=int(sub.integers(0, 2 ** 31)), config=config,
                grid=config.test_grid, tag="U-P"))
    for i, task in enumerate(manifest.test_uc):
        for j in range(per_combo_test):
            sub = rng.spawn(900_000 + i * 1000 + j)
            pos = sample_positions(sub, config.test_grid)
            pools["uc"].append(generate_episode(
                task, pos, seed=int(sub.integers(0, 2 ** 31)), config=config,
                grid=config.test_grid, tag="U-C"))
    return pools


# -- on-disk format --------------------------------------------------------------------

_EP_MAGIC = b"VLEP"
_EP_VERSION = 1


def save_episode(path, ep: Episode):
    header = json.dumps({
        "verb": ep.task.verb, "noun": ep.task.noun,
        "positions": {c: list(p) for c, p in ep.positions.items()},
        "seed": ep.seed, "t_len": int(ep.frames.shape[0] - 1),
        "tokens": ep.tokens, "tag": ep.tag,
        "frame_shape": list(ep.frames.shape),
        "joint_shape": list(ep.joints.shape),
        "sentence_shape": list(ep.sentence.shape),
    }).encode()
    with open(path, "wb") as f:
        f.write(_EP_MAGIC)
        f.write(struct.pack("<I", _EP_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for arr in (ep.frames, ep.joints, ep.sentence):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_episode(path) -> Episode:
    with open(path, "rb") as f:
        if f.read(4) != _EP_MAGIC:
            raise ValueError(f"not an episode file: {path}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _EP_VERSION:
            raise ValueError(f"unsupported episode version {version}")
        (n,) = struct.unpack("<Q", f.read(8))
        meta = json.loads(f.read(n))
        blob = f.read()
    arrays = []
    offset = 0
    for key in ("frame_shape", "joint_shape", "sentence_shape"):
        shape = tuple(meta[key])
        size = int(np.prod(shape))
        arrays.append(np.frombuffer(blob, dtype="<f8", count=size,
                                    offset=offset).reshape(shape).copy())
        offset += size * 8
    frames, joints, sentence = arrays
    return Episode(frames=frames, joints=joints, sentence=sentence,
                   tokens=list(meta["tokens"]),
                   task=TaskSpec(meta["verb"], meta["noun"]),
                   positions={c: tuple(p) for c, p in meta["positions"].items()},
                   seed=meta["seed"], tag=meta["tag"])


def save_dataset(directory, pools):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for split, episodes in pools.items():
        sub = directory / split
        sub.mkdir(exist_ok=True)
        for i, ep in enumerate(episodes):
            name = f"{split}/{i:04d}_{ep.task.verb}_{ep.task.noun}.ep"
            save_episode(directory / name, ep)
            lines.append(f"{name}\t{ep.tag}\t{' '.join(ep.tokens)}")
    (directory / "manifest.tsv").write_text(
        "path\ttag\tsentence\n" + "\n".join(lines) + "\n")


def load_dataset(directory):
    directory = Path(directory)
    manifest = directory / "manifest.tsv"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.tsv under {directory}")
    pools = {}
    for line in manifest.read_text().splitlines()[1:]:
        path = line.split("\t")[0]
        split = path.split("/")[0]
        pools.setdefault(split, []).append(load_episode(directory / path))
    return pools
