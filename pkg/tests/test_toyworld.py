"""World generator tests: scripted physics oracles, split bookkeeping, and
the on-disk episode format."""

import numpy as np
import pytest

from visuolang.diffcore import Rng
from visuolang.propriolang import Vocabulary
from visuolang.toyworld import (COLORS, GROUPS, TRAIN_COUNTS, VERBS, Episode,
                                TaskSpec, WorldConfig, WorldState,
                                build_splits, generate_dataset,
                                generate_episode, load_dataset, load_episode,
                                render_frame, sample_positions, save_dataset,
                                save_episode)

LAYOUT = {"red": (3, 4), "green": (6, 3), "blue": (4, 7),
          "purple": (7, 6), "yellow": (2, 7)}


def desk_config(**kw):
    base = dict(image_size=16, grid=10, test_grid=8, joints=4,
                t_base=20, t_jitter=2)
    base.update(kw)
    return WorldConfig(**base)


# -- task specs --------------------------------------------------------------------

def test_task_spec_rejects_unknown_words():
    with pytest.raises(ValueError, match="verb"):
        TaskSpec("fly", "red")
    with pytest.raises(ValueError, match="noun"):
        TaskSpec("grasp", "orange")


def test_sentences_use_vocabulary_tokens():
    vocab = Vocabulary.load()
    for verb in VERBS:
        for noun in COLORS:
            tokens = TaskSpec(verb, noun).sentence_tokens()
            assert tokens[-1] == "."
            assert len(tokens) <= 5
            onehot = vocab.encode_sentence(tokens)  # raises on unknown token
            assert onehot.shape == (5, 20)


def test_sentence_shapes_per_verb():
    assert TaskSpec("grasp", "red").sentence_tokens() == ["grasp", "red", "."]
    assert TaskSpec("move-left", "blue").sentence_tokens() == \
        ["move", "blue", "left", "."]
    assert TaskSpec("put-on-green", "red").sentence_tokens() == \
        ["put", "red", "on", "green", "."]


# -- world state -------------------------------------------------------------------

def test_world_state_validation():
    bad = WorldState(positions={"red": (11, 0)}, grid=10,
                     gripper=np.array([0.5, 0.5]))
    with pytest.raises(ValueError, match="outside"):
        bad.validate()
    overlap = WorldState(positions={"red": (1, 1), "blue": (1, 1)}, grid=10,
                         gripper=np.array([0.5, 0.5]))
    with pytest.raises(ValueError, match="overlap"):
        overlap.validate()


def test_sample_positions_non_overlapping_with_margin():
    for seed in range(20):
        pos = sample_positions(Rng(seed), grid=8)
        assert len(set(pos.values())) == 5
        for x, y in pos.values():
            assert 2 <= x <= 5 and 2 <= y <= 5


# -- rendering ---------------------------------------------------------------------

def test_render_is_deterministic_and_bounded():
    cfg = desk_config()
    world = WorldState(positions=dict(LAYOUT), grid=10,
                       gripper=np.array([0.4, 0.6]))
    f1 = render_frame(world, cfg)
    f2 = render_frame(world, cfg)
    np.testing.assert_array_equal(f1, f2)
    assert f1.shape == (3, 16, 16)
    assert f1.min() >= 0.0 and f1.max() <= 1.0


def test_render_shows_each_block_color():
    cfg = desk_config(image_size=32)
    world = WorldState(positions=dict(LAYOUT), grid=10,
                       gripper=np.array([0.05, 0.05]))
    frame = render_frame(world, cfg)
    # red block: a pixel with dominant red channel; likewise green and blue
    red = (frame[0] > 0.9) & (frame[1] < 0.3) & (frame[2] < 0.3)
    green = (frame[1] > 0.8) & (frame[0] < 0.3)
    blue = (frame[2] > 0.9) & (frame[0] < 0.3)
    assert red.any() and green.any() and blue.any()


def test_render_moves_with_gripper():
    cfg = desk_config()
    world = WorldState(positions=dict(LAYOUT), grid=10,
                       gripper=np.array([0.2, 0.8]))
    a = render_frame(world, cfg)
    world.gripper = np.array([0.8, 0.2])
    b = render_frame(world, cfg)
    assert np.abs(a - b).max() > 0.1


# -- scripted episodes ---------------------------------------------------------------

def test_episode_shapes_and_ranges():
    cfg = desk_config()
    ep = generate_episode(TaskSpec("grasp", "red"), LAYOUT, seed=0, config=cfg)
    t = ep.frames.shape[0] - 1
    assert 18 <= t <= 22
    assert ep.frames.shape == (t + 1, 3, 16, 16)
    assert ep.joints.shape == (t + 1, 4)
    assert ep.sentence.shape == (5, 20)
    assert ep.frames.min() >= 0.0 and ep.frames.max() <= 1.0
    assert ep.joints.min() >= 0.0 and ep.joints.max() <= 1.0


def test_episode_deterministic_under_seed():
    cfg = desk_config()
    a = generate_episode(TaskSpec("move-left", "blue"), LAYOUT, 3, cfg)
    b = generate_episode(TaskSpec("move-left", "blue"), LAYOUT, 3, cfg)
    np.testing.assert_array_equal(a.frames, b.frames)
    np.testing.assert_array_equal(a.joints, b.joints)
    c = generate_episode(TaskSpec("move-left", "blue"), LAYOUT, 4, cfg)
    assert c.frames.shape != a.frames.shape or \
        np.abs(c.frames - a.frames).max() > 0


def test_grasp_ends_with_gripper_on_block_closed():
    cfg = desk_config()
    ep = generate_episode(TaskSpec("grasp", "red"), LAYOUT, 0, cfg)
    final = ep.joints[-1]
    expect = (np.array(LAYOUT["red"]) + 0.5) / 10
    np.testing.assert_allclose(final[:2], expect, atol=1e-9)
    assert final[3] < 0.5          # hand closed
    assert ep.positions["red"] == LAYOUT["red"]  # block not displaced


@pytest.mark.parametrize("verb,delta", [("move-left", (-2, 0)),
                                        ("move-right", (2, 0)),
                                        ("move-front", (0, 2)),
                                        ("move-back", (0, -2))])
def test_move_displaces_only_target_block(verb, delta):
    cfg = desk_config()
    ep = generate_episode(TaskSpec(verb, "purple"), LAYOUT, 1, cfg)
    # final rendered frame reflects the displaced block
    want = (LAYOUT["purple"][0] + delta[0], LAYOUT["purple"][1] + delta[1])
    final_state = WorldState(
        positions={**LAYOUT, "purple": want}, grid=10,
        gripper=ep.joints[-1][:2])
    rendered = render_frame(final_state, cfg)
    np.testing.assert_allclose(ep.frames[-1], rendered, atol=1e-12)
    assert ep.joints[-1][3] > 0.5  # hand released


def test_put_on_moves_block_to_base():
    cfg = desk_config()
    ep = generate_episode(TaskSpec("put-on-green", "red"), LAYOUT, 2, cfg)
    expect = (np.array(LAYOUT["green"]) + 0.5) / 10
    np.testing.assert_allclose(ep.joints[-1][:2], expect, atol=1e-9)


def test_move_off_grid_is_rejected():
    cfg = desk_config()
    layout = dict(LAYOUT, red=(0, 4))
    with pytest.raises(ValueError, match="leaves the grid"):
        generate_episode(TaskSpec("move-left", "red"), layout, 0, cfg)


def test_missing_block_is_rejected():
    cfg = desk_config()
    layout = {k: v for k, v in LAYOUT.items() if k != "green"}
    with pytest.raises(ValueError, match="green"):
        generate_episode(TaskSpec("put-on-green", "red"), layout, 0, cfg)


def test_extra_joints_stay_in_range():
    cfg = desk_config(joints=6)
    ep = generate_episode(TaskSpec("grasp", "blue"), LAYOUT, 0, cfg)
    assert ep.joints.shape[1] == 6
    assert ep.joints.min() >= 0.0 and ep.joints.max() <= 1.0


# -- splits -------------------------------------------------------------------------

def test_group_shapes_match_design():
    assert len(GROUPS["A"][0]) * len(GROUPS["A"][1]) == 40
    assert len(GROUPS["B"][0]) * len(GROUPS["B"][1]) == 30
    assert len(GROUPS["C"][0]) * len(GROUPS["C"][1]) == 15
    assert len(GROUPS["D"][0]) * len(GROUPS["D"][1]) == 9


@pytest.mark.parametrize("group", sorted(GROUPS))
@pytest.mark.parametrize("ratio", [1, 2, 3])
def test_split_counts_and_coverage(group, ratio):
    nouns, verbs = GROUPS[group]
    m = build_splits(group, ratio, seed=0)
    assert len(m.train) == TRAIN_COUNTS[group][ratio]
    assert len(m.train) + len(m.test_uc) == len(nouns) * len(verbs)
    assert not set(m.train) & set(m.test_uc)
    assert {t.verb for t in m.train} == set(verbs)
    assert {t.noun for t in m.train} == set(nouns)


def test_split_deterministic_and_seed_sensitive():
    a = build_splits("A", 2, seed=0)
    b = build_splits("A", 2, seed=0)
    assert a.train == b.train and a.test_uc == b.test_uc
    variants = {tuple(build_splits("A", 2, seed=s).test_uc)
                for s in range(5)}
    assert len(variants) > 1


def test_split_rejects_bad_arguments():
    with pytest.raises(ValueError, match="group"):
        build_splits("E", 1, 0)
    with pytest.raises(ValueError, match="ratio"):
        build_splits("A", 4, 0)


# -- dataset generation ----------------------------------------------------------------

def test_generate_dataset_pools_and_tags():
    cfg = desk_config(t_base=8, t_jitter=1)
    m = build_splits("D", 3, seed=0)
    pools = generate_dataset(m, cfg, seed=1, per_combo_train=2,
                             per_combo_test=1)
    assert len(pools["train"]) == 3 * 2
    assert len(pools["up"]) == 3
    assert len(pools["uc"]) == 6
    assert all(ep.tag == "train" for ep in pools["train"])
    assert all(ep.tag == "U-P" for ep in pools["up"])
    assert all(ep.tag == "U-C" for ep in pools["uc"])
    # U-P reuses training combinations, U-C only held-out ones
    train_combos = set(m.train)
    assert all(ep.task in train_combos for ep in pools["up"])
    assert all(ep.task not in train_combos for ep in pools["uc"])
    # test pools live on the smaller grid
    for ep in pools["uc"]:
        assert all(0 <= v < cfg.test_grid
                   for p in ep.positions.values() for v in p)


# -- file format ------------------------------------------------------------------------

def test_episode_round_trip(tmp_path):
    cfg = desk_config(t_base=8, t_jitter=0)
    ep = generate_episode(TaskSpec("put-on-blue", "yellow"), LAYOUT, 9, cfg,
                          tag="U-C")
    path = tmp_path / "ep.bin"
    save_episode(path, ep)
    back = load_episode(path)
    np.testing.assert_array_equal(back.frames, ep.frames)
    np.testing.assert_array_equal(back.joints, ep.joints)
    np.testing.assert_array_equal(back.sentence, ep.sentence)
    assert back.task == ep.task
    assert back.tokens == ep.tokens
    assert back.positions == ep.positions
    assert back.tag == "U-C"


def test_episode_file_rejects_garbage(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not an episode at all")
    with pytest.raises(ValueError, match="episode"):
        load_episode(path)


def test_dataset_round_trip(tmp_path):
    cfg = desk_config(t_base=8, t_jitter=0)
    m = build_splits("D", 3, seed=0)
    pools = generate_dataset(m, cfg, seed=2, per_combo_train=1,
                             per_combo_test=1)
    save_dataset(tmp_path / "data", pools)
    assert (tmp_path / "data" / "manifest.tsv").exists()
    back = load_dataset(tmp_path / "data")
    assert sorted(back) == ["train", "uc", "up"]
    for split in pools:
        assert len(back[split]) == len(pools[split])
        np.testing.assert_array_equal(back[split][0].frames,
                                      pools[split][0].frames)


def test_load_dataset_requires_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)
