"""scikit-learn style wrappers: a deblurring estimator and a blur transformer."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import read_tensors
from .config import TrainConfig
from .data import ImagePair, apply_blur, make_psf
from .metrics import psnr, to_unit_range
from .networks import NetworkSpec
from .training import Trainer, load_generator
from .validation import check_images, check_pair, check_positive_int


class SparseCycleDeblurrer(BaseEstimator, TransformerMixin):
    """Learns a blur-to-sharp translation G_X from paired images.

    ``fit(X, y)`` takes blurry images ``X`` and sharp images ``y`` as
    (N, C, H, W) arrays in [-1, 1]. Both generators and both critics are
    trained; ``predict``/``transform`` apply G_X in evaluation mode.
    ``score`` is the mean PSNR (dB) of the restorations.
    """

    def __init__(
        self,
        base_channels=8,
        n_res_blocks=3,
        sparse=True,
        kwinner=True,
        perceptual=True,
        activation_density=0.3,
        weight_density=0.5,
        boost_strength=1.5,
        epochs=200,
        lr=2e-4,
        decay_start_epoch=None,
        lambda_cyc=10.0,
        lambda_perc=100.0,
        lambda_gp=10.0,
        augment_flip=True,
        batch_size=1,
        random_state=0,
    ):
        self.base_channels = base_channels
        self.n_res_blocks = n_res_blocks
        self.sparse = sparse
        self.kwinner = kwinner
        self.perceptual = perceptual
        self.activation_density = activation_density
        self.weight_density = weight_density
        self.boost_strength = boost_strength
        self.epochs = epochs
        self.lr = lr
        self.decay_start_epoch = decay_start_epoch
        self.lambda_cyc = lambda_cyc
        self.lambda_perc = lambda_perc
        self.lambda_gp = lambda_gp
        self.augment_flip = augment_flip
        self.batch_size = batch_size
        self.random_state = random_state

    def _specs(self, channels: int):
        epochs = check_positive_int(self.epochs, "epochs")
        seed = 0 if self.random_state is None else int(self.random_state)
        net = NetworkSpec(
            base_channels=check_positive_int(self.base_channels, "base_channels"),
            n_res_blocks=check_positive_int(self.n_res_blocks, "n_res_blocks"),
            image_channels=channels,
            sparse_res_blocks=bool(self.sparse),
            kwinner=bool(self.kwinner),
            activation_density=self.activation_density,
            weight_density=self.weight_density,
            boost_strength=self.boost_strength,
            seed=seed,
        )
        decay = epochs // 2 if self.decay_start_epoch is None else self.decay_start_epoch
        config = TrainConfig(
            epochs=epochs,
            lr0=self.lr,
            decay_start_epoch=decay,
            batch_size=check_positive_int(self.batch_size, "batch_size"),
            lambda_cyc=self.lambda_cyc,
            lambda_perc=self.lambda_perc,
            lambda_gp=self.lambda_gp,
            perceptual=bool(self.perceptual),
            augment_flip=bool(self.augment_flip),
            seed=seed,
        )
        return net, config

    def fit(self, X, y):
        X, y = check_pair(X, y)
        net, config = self._specs(X.shape[1])
        pairs = [ImagePair(blurry=b, sharp=s, id=f"{i:04d}") for i, (b, s) in enumerate(zip(X, y))]
        self.trainer_ = Trainer(net, config, X.shape[1:])
        self.trainer_.fit(pairs)
        self.generator_ = self.trainer_.g_x.eval()
        self.history_ = list(self.trainer_.history)
        self.image_shape_ = tuple(X.shape[1:])
        return self

    def predict(self, X, batch_size: int = 16):
        check_is_fitted(self, "generator_")
        X = check_images(X, channels=self.image_shape_[0])
        out = []
        self.generator_.eval()
        with torch.no_grad():
            for start in range(0, len(X), batch_size):
                out.append(self.generator_(torch.from_numpy(X[start:start + batch_size])).numpy())
        return np.concatenate(out)

    def transform(self, X):
        return self.predict(X)

    def score(self, X, y):
        """Mean PSNR in dB between ``predict(X)`` and ``y``."""
        X, y = check_pair(X, y)
        restored = self.predict(X)
        return float(np.mean([psnr(to_unit_range(r), to_unit_range(s)) for r, s in zip(restored, y)]))

    def save(self, path) -> None:
        check_is_fitted(self, "trainer_")
        self.trainer_.save_checkpoint(path)

    @classmethod
    def from_checkpoint(cls, path) -> "SparseCycleDeblurrer":
        """Inference-only estimator around the G_X stored in ``path``."""
        gen = load_generator(path, "gx")
        spec = gen.spec
        est = cls(
            base_channels=spec.base_channels,
            n_res_blocks=spec.n_res_blocks,
            sparse=spec.sparse_res_blocks,
            kwinner=spec.kwinner,
            activation_density=spec.activation_density,
            weight_density=spec.weight_density,
            boost_strength=spec.boost_strength,
            random_state=spec.seed,
        )
        est.generator_ = gen
        est.image_shape_ = (spec.image_channels,) + tuple(_trained_size(path))
        return est


def _trained_size(path):
    shape = read_tensors(path)["meta.image_shape"]
    return int(shape[1]), int(shape[2])


class MotionBlur(BaseEstimator, TransformerMixin):
    """Stateless transformer applying a linear motion blur to (N, C, H, W) images."""

    def __init__(self, length: float = 7, angle: float = 0.0, clip: bool = True):
        self.length = length
        self.angle = angle
        self.clip = clip

    def fit(self, X, y=None):
        check_images(X, multiple_of=1, value_range=False)
        self.psf_ = make_psf(self.length, self.angle)
        return self

    def transform(self, X):
        check_is_fitted(self, "psf_")
        X = check_images(X, multiple_of=1, value_range=False)
        out = np.stack([apply_blur(img, self.psf_) for img in X]).astype(np.float32)
        return np.clip(out, -1, 1) if self.clip else out
