import numpy as np
import pytest

from vlnhijack import agent as ag
from vlnhijack import storage
from vlnhijack.config import ConfigError, RunConfig, config_hash, parse_config, replace, serialize_config

from conftest import corridor_world, make_instance


def test_empty_config_gives_defaults():
    cfg = parse_config("", environ={})
    assert cfg == RunConfig()
    assert cfg.attack.epsilon == 0.3 and cfg.attack.modes == ("stop", "trajectory")
    assert cfg.ablation.iterations == (300, 600, 900)


def test_epsilon_out_of_range():
    with pytest.raises(ConfigError, match="epsilon out of range"):
        parse_config("[attack]\nepsilon = 1.5\n", environ={})
    with pytest.raises(ConfigError, match="epsilon out of range"):
        parse_config("[attack]\nepsilon = 0\n", environ={})


@pytest.mark.parametrize("text", ["[attack]\nepsilon_max = 0.2\n", "[defense]\nx = 1\n",
                                  "[agent]\ndim = many\n", "no section header\n"])
def test_bad_config_text(text):
    with pytest.raises(ConfigError):
        parse_config(text, environ={})


def test_serialize_roundtrip_and_hash():
    cfg = replace(parse_config("[world]\nn_worlds = 2\n[ablation]\nepsilon = 0.2, 0.4\n", environ={}),
                  "attack", lr=0.05)
    again = parse_config(serialize_config(cfg), environ={})
    assert again == cfg
    assert config_hash(again) == config_hash(cfg)
    assert config_hash(cfg) != config_hash(RunConfig())


def test_environment_override():
    cfg = parse_config("[attack]\nepsilon = 0.2\n", environ={"VHL_ATTACK_EPSILON": "0.5", "VHL_RUN_SEED": "7",
                                                             "OTHER": "x"})
    assert cfg.attack.epsilon == 0.5 and cfg.run.seed == 7
    with pytest.raises(ConfigError):
        parse_config("", environ={"VHL_ATTACK_EPSILON": "2"})


def test_texture_roundtrip_and_corruption(tmp_path):
    rng = np.random.default_rng(0)
    t = rng.uniform(size=(8, 4, 3)).astype(np.float32).astype(np.float64)
    blob = storage.texture_to_bytes(t)
    assert blob[:4] == b"TXA1" and len(blob) == 16 + 8 * 4 * 3 * 4
    np.testing.assert_array_equal(storage.texture_from_bytes(blob), t)
    storage.save_texture(tmp_path / "a.txa", t)
    np.testing.assert_array_equal(storage.load_texture(tmp_path / "a.txa"), t)
    with pytest.raises(ValueError):
        storage.texture_from_bytes(b"TXA0" + blob[4:])
    with pytest.raises(ValueError):
        storage.texture_from_bytes(blob[:-4])
    with pytest.raises(ValueError):
        storage.texture_to_bytes(np.zeros((4, 4)))


def test_quantize_within_budget():
    rng = np.random.default_rng(1)
    orig = rng.uniform(size=(16, 16, 3)).astype(np.float32).astype(np.float64)
    eps = 0.1
    for _ in range(20):
        t = np.clip(orig + rng.uniform(-eps, eps, orig.shape), 0, 1)
        # push some texels exactly onto the boundary, where float32 rounding can overshoot
        t.flat[::7] = np.clip(orig.flat[::7] + eps, 0, 1)
        q = storage.quantize_within_budget(t, orig, eps)
        assert np.abs(q - orig).max() <= eps
        assert q.min() >= 0 and q.max() <= 1
        assert np.array_equal(q.astype(np.float32).astype(np.float64), q)
        np.testing.assert_allclose(q, t, atol=1e-6)


def test_params_roundtrip(tmp_path):
    p = ag.PolicyParams.initialize(dim=8, seed=3)
    storage.save_params(tmp_path / "params", p, {"note": "x"})
    q = storage.load_params(tmp_path / "params.json")
    assert q.fingerprint() == p.fingerprint()
    assert storage.read_json(tmp_path / "params.json")["note"] == "x"


def test_instance_and_world_roundtrip(tmp_path):
    world = corridor_world()
    inst = make_instance(world)
    assert storage.instance_from_dict(storage.instance_to_dict(inst)) == inst
    path = storage.save_world(tmp_path, world.scene, world.graph, inst.train_split, {"seed": 1})
    scene, graph, eps = storage.load_world(path)
    np.testing.assert_array_equal(scene.vertices, world.scene.vertices)
    np.testing.assert_array_equal(scene.atlas.texels, world.scene.atlas.texels.astype(np.float32))
    assert graph.edges == world.graph.edges and scene.objects == world.scene.objects
    assert tuple(eps) == inst.train_split


def test_require_and_hash_check(tmp_path):
    with pytest.raises(storage.ArtifactError):
        storage.require(tmp_path / "missing.json")
    with pytest.raises(storage.ArtifactError):
        storage.check_hash({"config_hash": "a"}, "b", tmp_path)
    storage.check_hash({"config_hash": "a"}, "a", tmp_path)
