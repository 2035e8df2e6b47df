"""Shared fixtures: small synthetic corpora, mock backends, web-image pools."""

from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from interweave.episode import DatasetManifest, Episode, FORMAT_VERSION, Frame
from interweave.mocks import MockBackend, MockBackendConfig
from interweave.synth import SceneConfig, TruthIndex, generate_episode_set


def make_episode(ep_id: str, n_frames: int = 2, instruction: str = "put eggplant in basket") -> Episode:
    rng = np.random.default_rng(abs(hash(ep_id)) % 2**32)
    frames = tuple(
        Frame(
            index=t,
            image_refs=(f"{ep_id}/frame_{t:03d}.png",),
            proprio=tuple(rng.uniform(-1, 1, 7)),
            action=tuple(rng.uniform(-1, 1, 7)),
        )
        for t in range(n_frames)
    )
    return Episode(id=ep_id, source_dataset="fixture", instruction=instruction, frames=frames)


def make_manifest(n_episodes: int = 2, n_frames: int = 2) -> DatasetManifest:
    episodes = [make_episode(f"ep{i}", n_frames) for i in range(n_episodes)]
    return DatasetManifest(version=FORMAT_VERSION, episodes=episodes)


def write_fixture_images(manifest: DatasetManifest, root) -> None:
    images = root / manifest.image_root
    for ep in manifest.episodes:
        for frame in ep.frames:
            for ref in frame.image_refs:
                path = images / ref
                path.parent.mkdir(parents=True, exist_ok=True)
                Image.new("RGB", (32, 24), (10, 20, 30)).save(path)


@pytest.fixture(scope="session")
def synth_corpus(tmp_path_factory):
    """A 40-episode rendered corpus shared by the stage tests."""
    root = tmp_path_factory.mktemp("synth")
    manifest, truth_path = generate_episode_set(40, SceneConfig(frames=5), seed=1234, out_dir=root)
    return {"root": root, "manifest": manifest, "truth_path": truth_path,
            "images": root / "images", "truth": TruthIndex.load(truth_path)}


@pytest.fixture()
def perfect_backend(synth_corpus):
    return MockBackend(synth_corpus["truth"], MockBackendConfig(seed=5))


@pytest.fixture(scope="session")
def web_pool_dir(tmp_path_factory):
    """Pool tree with one bucket per drawable shape plus a 'spoon' bucket."""
    root = tmp_path_factory.mktemp("pool")
    from interweave.synth import DRAWABLE_SHAPES

    for category in list(DRAWABLE_SHAPES) + ["spoon"]:
        bucket = root / category
        bucket.mkdir()
        for i in range(3):
            Image.new("RGB", (16, 16), (i * 40, 80, 120)).save(bucket / f"{category}_{i}.png")
    return root
