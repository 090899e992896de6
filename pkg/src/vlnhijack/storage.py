"""On-disk formats: world JSON, TXA1 texture blobs, params blobs, atomic writes."""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .agent import PolicyParams
from .attack import AttackInstance
from .worldgen import Episode, NavGraph, Scene, SceneObject, TextureAtlas

TEXTURE_MAGIC = b"TXA1"
_HEADER = struct.Struct("<4sIII")  # magic, width, height, reserved


class ArtifactError(RuntimeError):
    """A required upstream artifact is missing or was produced by another config."""


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode("utf-8"))


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# --------------------------------------------------------------------------- textures


def texture_to_bytes(texels: np.ndarray) -> bytes:
    t = np.asarray(texels)
    if t.ndim != 3 or t.shape[2] != 3:
        raise ValueError(f"texels must be (H, W, 3); got {t.shape}")
    h, w, _ = t.shape
    return _HEADER.pack(TEXTURE_MAGIC, w, h, 0) + t.astype("<f4").tobytes(order="C")


def texture_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise ValueError("texture blob shorter than its header")
    magic, w, h, _ = _HEADER.unpack_from(blob)
    if magic != TEXTURE_MAGIC:
        raise ValueError(f"bad texture magic {magic!r}")
    body = blob[_HEADER.size:]
    if len(body) != w * h * 3 * 4:
        raise ValueError("texture blob size does not match its header")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, 3).astype(np.float64)


def quantize_within_budget(texels: np.ndarray, original: np.ndarray, epsilon: float) -> np.ndarray:
    """Round to float32 without leaving the L-inf ball (``original`` must be float32-exact)."""
    q = texels.astype(np.float32)
    o = original.astype(np.float32)
    toward = np.nextafter(q, o)
    over = np.abs(q.astype(np.float64) - original) > epsilon
    q = np.where(over, toward, q)
    return np.clip(q, 0.0, 1.0).astype(np.float64)


def save_texture(path, texels: np.ndarray) -> None:
    atomic_write_bytes(path, texture_to_bytes(texels))


def load_texture(path) -> np.ndarray:
    return texture_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------- worlds and episodes


def episode_to_dict(e: Episode) -> dict:
    return {"episode_id": e.episode_id, "env_id": e.env_id, "instruction": list(e.instruction),
            "trajectory": list(e.trajectory)}


def episode_from_dict(d: dict) -> Episode:
    return Episode(d["episode_id"], d["env_id"], tuple(d["instruction"]), tuple(int(v) for v in d["trajectory"]))


def world_to_dict(scene: Scene, graph: NavGraph, episodes=(), texture_file: str = "") -> dict:
    return {
        "env_id": scene.env_id,
        "vertices": scene.vertices.tolist(),
        "faces": scene.faces.tolist(),
        "face_uvs": scene.face_uvs.tolist(),
        "face_tiles": scene.face_tiles.tolist(),
        "objects": [{"object_id": oid, "category": o.category, "faces": list(o.faces), "center": list(o.center)}
                    for oid, o in sorted(scene.objects.items())],
        "atlas": {"file": texture_file, "width": scene.atlas.width, "height": scene.atlas.height},
        "nodes": graph.positions.tolist(),
        "edges": sorted([list(e) for e in graph.edges]),
        "episodes": [episode_to_dict(e) for e in episodes],
    }


def world_from_dict(d: dict, texels: np.ndarray):
    """Returns (scene, graph, episodes)."""
    objects = {int(o["object_id"]): SceneObject(o["category"], tuple(o["faces"]), tuple(o["center"]))
               for o in d["objects"]}
    nf = len(d["faces"])
    scene = Scene(
        vertices=np.asarray(d["vertices"], dtype=np.float64).reshape(-1, 3),
        faces=np.asarray(d["faces"], dtype=np.int64).reshape(nf, 3),
        face_uvs=np.asarray(d["face_uvs"], dtype=np.float64).reshape(nf, 3, 2),
        objects=objects,
        atlas=TextureAtlas(texels),
        face_tiles=np.asarray(d["face_tiles"], dtype=np.int64).reshape(nf, 3),
        env_id=d["env_id"],
    )
    graph = NavGraph(np.asarray(d["nodes"], dtype=np.float64), frozenset(tuple(e) for e in d["edges"]))
    scene.validate()
    graph.validate()
    return scene, graph, [episode_from_dict(e) for e in d["episodes"]]


def save_world(directory, scene: Scene, graph: NavGraph, episodes=(), extra: dict | None = None) -> Path:
    directory = Path(directory)
    tex_name = f"{scene.env_id}.txa"
    save_texture(directory / tex_name, scene.atlas.texels)
    doc = world_to_dict(scene, graph, episodes, tex_name)
    doc.update(extra or {})
    path = directory / f"{scene.env_id}.json"
    write_json(path, doc)
    return path


def load_world(path):
    path = Path(path)
    doc = read_json(path)
    texels = load_texture(path.parent / doc["atlas"]["file"])
    return world_from_dict(doc, texels)


# --------------------------------------------------------------------------- params


def save_params(path, params: PolicyParams, extra: dict | None = None) -> None:
    header, blob = params.to_bytes()
    path = Path(path)
    atomic_write_bytes(path.with_suffix(".bin"), blob)
    write_json(path.with_suffix(".json"), {**header, **(extra or {})})


def load_params(path) -> PolicyParams:
    path = Path(path)
    return PolicyParams.from_bytes(read_json(path.with_suffix(".json")), path.with_suffix(".bin").read_bytes())


# --------------------------------------------------------------------------- attack instances


def instance_to_dict(inst: AttackInstance) -> dict:
    return {
        "instance_id": inst.instance_id, "env_id": inst.env_id, "mode": inst.mode,
        "test_episode": episode_to_dict(inst.test_episode), "attack_object": inst.attack_object,
        "category": inst.category, "visibility": inst.visibility, "v_atk": inst.v_atk,
        "attack_trajectory": list(inst.attack_trajectory),
        "train_split": [episode_to_dict(e) for e in inst.train_split],
        "val_split": [episode_to_dict(e) for e in inst.val_split],
    }


def instance_from_dict(d: dict) -> AttackInstance:
    return AttackInstance(
        instance_id=d["instance_id"], env_id=d["env_id"], mode=d["mode"],
        test_episode=episode_from_dict(d["test_episode"]), attack_object=int(d["attack_object"]),
        category=d["category"], visibility=float(d["visibility"]), v_atk=int(d["v_atk"]),
        attack_trajectory=tuple(int(v) for v in d["attack_trajectory"]),
        train_split=tuple(episode_from_dict(e) for e in d["train_split"]),
        val_split=tuple(episode_from_dict(e) for e in d["val_split"]),
    )


def require(path, what: str | None = None) -> Path:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"{what or 'required artifact'} not found: {path}")
    return path


def check_hash(doc: dict, expected: str, path) -> None:
    found = doc.get("config_hash")
    if found != expected:
        raise ArtifactError(f"{path} was produced by config {found}, expected {expected}")
