"""Session fixtures: the default synthetic dataset and trained toy models.

Training takes a few minutes on one core, so results are cached under the
pytest cache directory, keyed by a hash of the package sources they depend on.
"""

import hashlib
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import pointca  # noqa: E402
from pointca import campaign as cp  # noqa: E402
from pointca.data import SHAPE_CLASSES, DatasetConfig, build_pair_manifest, generate_dataset, load_dataset, save_dataset  # noqa: E402
from pointca.models import (  # noqa: E402
    Classifier,
    CompletionModel,
    TrainConfig,
    load_weights,
    save_weights,
    train_classifier,
    train_completion,
)

SRC = Path(pointca.__file__).parent
COMPLETION_EPOCHS = 60
CLASSIFIER_EPOCHS = 30
VARIANT_WIDTHS = dict(enc_hidden=96, feat=128, dec_hidden=192)
PAIR_COUNT = 50


def _source_key():
    h = hashlib.sha256()
    for name in ("autodiff.py", "data.py", "geometry.py", "metrics.py", "models.py"):
        h.update((SRC / name).read_bytes())
    h.update(f"{COMPLETION_EPOCHS}-{CLASSIFIER_EPOCHS}-{VARIANT_WIDTHS}".encode())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def cache_dir(request, tmp_path_factory):
    try:
        base = Path(request.config.cache.mkdir("pointca"))
    except AttributeError:
        base = tmp_path_factory.mktemp("pointca")
    d = base / _source_key()
    d.mkdir(parents=True, exist_ok=True)
    return d


@pytest.fixture(scope="session")
def dataset_root(cache_dir):
    root = cache_dir / "data"
    if not (root / "dataset.json").exists():
        save_dataset(generate_dataset(DatasetConfig()), root, DatasetConfig())
    return root


@pytest.fixture(scope="session")
def samples(dataset_root):
    return load_dataset(dataset_root)


def _cached_model(path, build):
    if path.exists():
        return load_weights(path)
    model = build()
    save_weights(model, path)
    return model


@pytest.fixture(scope="session")
def completion_model(cache_dir, samples):
    def build():
        x, y = cp.completion_training_set(samples)
        m = CompletionModel(seed=0)
        train_completion(m, x, y, TrainConfig(epochs=COMPLETION_EPOCHS), log_every=0)
        return m

    return _cached_model(cache_dir / "completion.bin", build)


@pytest.fixture(scope="session")
def variant_model(cache_dir, samples):
    def build():
        x, y = cp.completion_training_set(samples)
        m = CompletionModel(seed=1, **VARIANT_WIDTHS)
        train_completion(m, x, y, TrainConfig(epochs=COMPLETION_EPOCHS, seed=1), log_every=0)
        return m

    return _cached_model(cache_dir / "variant.bin", build)


@pytest.fixture(scope="session")
def classifier(cache_dir, samples):
    def build():
        names = list(SHAPE_CLASSES)
        clouds, labels = cp.classifier_training_set(samples, names)
        c = Classifier(len(names), seed=0, class_names=names)
        train_classifier(c, clouds, labels, TrainConfig(epochs=CLASSIFIER_EPOCHS), log_every=0)
        return c

    return _cached_model(cache_dir / "classifier.bin", build)


@pytest.fixture(scope="session")
def manifest(samples, dataset_root):
    return build_pair_manifest(samples, seed=0, limit=PAIR_COUNT, root=dataset_root)


@pytest.fixture(scope="session")
def pairs(manifest, completion_model):
    loaded = cp.load_pairs(manifest)
    cp.attach_denominators(manifest, loaded, completion_model)
    return loaded
