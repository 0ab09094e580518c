import numpy as np
import pytest
import torch
from scipy import ndimage

from styleaugment.data import handle_from_arrays
from styleaugment.stylizer import init_weights


def make_images(n, h=32, w=None, seed=0, labels_from_color=False, num_classes=10):
    """Synthetic natural-ish images: smooth blurred noise + gradients.

    With labels_from_color=True the per-class mean brightness is shifted so
    a classifier (or a stub predictor) can actually recover the label.
    """
    w = w or h
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    imgs = np.empty((n, h, w, 3), dtype=np.uint8)
    yy = np.linspace(0, 1, h)[:, None, None]
    xx = np.linspace(0, 1, w)[None, :, None]
    for i in range(n):
        noise = rng.normal(0, 1, size=(h, w, 3))
        smooth = ndimage.gaussian_filter(noise, sigma=(3, 3, 0))
        smooth = (smooth - smooth.min()) / (np.ptp(smooth) + 1e-9)
        img = 0.6 * smooth + 0.2 * yy + 0.2 * xx * rng.random()
        if labels_from_color:
            # class-coded mean brightness with only faint texture on top
            img = 0.05 * smooth + (0.1 + 0.8 * labels[i] / num_classes)
        imgs[i] = np.clip(img * 255, 0, 255).astype(np.uint8)
    return imgs, labels.astype(np.int64)


@pytest.fixture(scope="session")
def small_weights():
    return init_weights("small4", seed=0)


@pytest.fixture(scope="session")
def train_handle():
    imgs, labels = make_images(256, h=32, seed=1)
    return handle_from_arrays(imgs, labels, "train", 10, seed=7)


@pytest.fixture(scope="session")
def test_handle():
    imgs, labels = make_images(128, h=32, seed=2)
    return handle_from_arrays(imgs, labels, "test", 10, seed=7)


@pytest.fixture(scope="session")
def fake_cifar_root(tmp_path_factory):
    """Full-size random CIFAR-10 archive in the standard pickle layout."""
    import pickle

    root = tmp_path_factory.mktemp("cifar") / "cifar-10-batches-py"
    root.mkdir()
    rng = np.random.default_rng(0)
    for name in [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]:
        data = rng.integers(0, 256, size=(10000, 3072), dtype=np.uint8)
        labels = rng.integers(0, 10, size=10000).tolist()
        with open(root / name, "wb") as f:
            pickle.dump({b"data": data, b"labels": labels}, f)
    return root.parent


@pytest.fixture()
def image_folder_root(tmp_path):
    """root/{train,test}/<class>/*.png with 3 classes of 16x16 images."""
    from PIL import Image

    rng = np.random.default_rng(3)
    for split, per_class in (("train", 8), ("test", 4)):
        for cls in ["ant", "bee", "cat"]:
            d = tmp_path / split / cls
            d.mkdir(parents=True)
            for i in range(per_class):
                arr = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
                Image.fromarray(arr).save(d / f"{i}.png")
    return tmp_path


class MeanBrightnessModel(torch.nn.Module):
    """Stub classifier reading the class straight from mean brightness.

    Pairs with make_images(labels_from_color=True): perfect on clean data,
    degraded by anything that shifts global brightness.
    """

    def __init__(self, normalization, num_classes=10):
        super().__init__()
        self.mean = torch.tensor(normalization[0]).view(1, 3, 1, 1)
        self.std = torch.tensor(normalization[1]).view(1, 3, 1, 1)
        self.num_classes = num_classes
        self.dummy = torch.nn.Parameter(torch.zeros(1))  # so .parameters() is non-empty

    def forward(self, x):
        raw = x * self.std + self.mean
        b = raw.mean(dim=(1, 2, 3), keepdim=False)
        centers = torch.tensor(
            [0.05 * 0.5 + 0.1 + 0.8 * k / self.num_classes for k in range(self.num_classes)]
        )
        return -(b[:, None] - centers[None, :]).abs() * 50.0


class ConstantModel(torch.nn.Module):
    def __init__(self, cls, num_classes=10):
        super().__init__()
        self.cls = cls
        self.num_classes = num_classes

    def forward(self, x):
        out = torch.zeros(x.shape[0], self.num_classes)
        out[:, self.cls] = 1.0
        return out
