"""scikit-learn compatible wrappers around the encoder and the VTN classifier.

Samples are :class:`EventStream` objects (or pre-encoded :class:`Video`s);
``X`` is any sequence of them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, column_or_1d

from .frames import AugmentConfig, EncoderConfig
from .model import ModelConfig
from .pipeline import TrainConfig, predict_video, to_video, train
from .validation import check_event_inputs


class EventFrameEncoder(TransformerMixin, BaseEstimator):
    """Stateless transformer: event streams -> event-frame videos."""

    def __init__(
        self,
        rho_usec=50_000,
        spatial_size=64,
        channel_layout="two_channel",
        normalization="clamp_k",
        clamp_k=8,
    ):
        self.rho_usec = rho_usec
        self.spatial_size = spatial_size
        self.channel_layout = channel_layout
        self.normalization = normalization
        self.clamp_k = clamp_k

    def _config(self):
        return EncoderConfig(
            self.rho_usec, self.spatial_size, self.channel_layout, self.normalization, self.clamp_k
        )

    def fit(self, X, y=None):
        check_event_inputs(X, allow_videos=False)
        self.config_ = self._config()
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        return [to_video(s, self.config_) for s in check_event_inputs(X, allow_videos=False)]


@dataclass
class _MemorySample:
    source_id: str
    label: int
    data: object

    def load(self):
        return self.data


class EventTransActClassifier(ClassifierMixin, BaseEstimator):
    """VTN action classifier trained with cross-entropy plus the
    event-contrastive loss over two augmented views of each sample.

    Architecture defaults are desk-scale (64x64 input, 64-d embeddings);
    loss, schedule and optimiser defaults match the full-size training setup.
    """

    def __init__(
        self,
        *,
        image_size=64,
        patch_size=16,
        embed_dim=64,
        spatial_depth=2,
        spatial_heads=4,
        temporal_layers=3,
        temporal_heads=8,
        attention_window=8,
        clip_len=16,
        proj_hidden=128,
        proj_dim=128,
        dropout=0.0,
        rho_usec=50_000,
        channel_layout="two_channel",
        normalization="clamp_k",
        clamp_k=8,
        drop_prob=0.1,
        rho_choices=(25_000, 50_000, 100_000),
        crop_scale_range=(0.6, 1.0),
        hflip_prob=0.5,
        epochs=100,
        warmup_epochs=10,
        base_lr=4e-5,
        batch_size=16,
        alpha=1.0,
        tau=0.1,
        eval_clips=5,
        random_state=0,
    ):
        self.image_size = image_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.spatial_depth = spatial_depth
        self.spatial_heads = spatial_heads
        self.temporal_layers = temporal_layers
        self.temporal_heads = temporal_heads
        self.attention_window = attention_window
        self.clip_len = clip_len
        self.proj_hidden = proj_hidden
        self.proj_dim = proj_dim
        self.dropout = dropout
        self.rho_usec = rho_usec
        self.channel_layout = channel_layout
        self.normalization = normalization
        self.clamp_k = clamp_k
        self.drop_prob = drop_prob
        self.rho_choices = rho_choices
        self.crop_scale_range = crop_scale_range
        self.hflip_prob = hflip_prob
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.base_lr = base_lr
        self.batch_size = batch_size
        self.alpha = alpha
        self.tau = tau
        self.eval_clips = eval_clips
        self.random_state = random_state

    def _configs(self, num_classes):
        encoder = EncoderConfig(
            self.rho_usec, self.image_size, self.channel_layout, self.normalization, self.clamp_k
        )
        model = ModelConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            in_channels=encoder.channels,
            embed_dim=self.embed_dim,
            spatial_depth=self.spatial_depth,
            spatial_heads=self.spatial_heads,
            temporal_layers=self.temporal_layers,
            temporal_heads=self.temporal_heads,
            attention_window=self.attention_window,
            clip_len=self.clip_len,
            num_classes=num_classes,
            proj_hidden=self.proj_hidden,
            proj_dim=self.proj_dim,
            dropout=self.dropout,
        )
        seed = 0 if self.random_state is None else int(self.random_state)
        train_config = TrainConfig(
            epochs=self.epochs,
            warmup_epochs=self.warmup_epochs,
            base_lr=self.base_lr,
            batch_size=self.batch_size,
            alpha=self.alpha,
            tau=self.tau,
            seed=seed,
            clip_len=self.clip_len,
            eval_clips=self.eval_clips,
            augment=AugmentConfig(
                self.drop_prob, tuple(self.rho_choices), tuple(self.crop_scale_range), self.hflip_prob, seed
            ),
            encoder=encoder,
        )
        return encoder, model, train_config

    def fit(self, X, y):
        X = check_event_inputs(X)
        y = column_or_1d(np.asarray(y), warn=True)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self.encoder_config_, self.model_config_, self.train_config_ = self._configs(len(self.classes_))
        samples = [_MemorySample(f"sample-{i}", int(c), x) for i, (x, c) in enumerate(zip(X, encoded))]
        result = train(samples, self.model_config_, self.train_config_)
        self.model_ = result.checkpoint.model
        self.history_ = result.log
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_event_inputs(X)
        return np.stack(
            [
                predict_video(
                    self.model_, to_video(x, self.encoder_config_), self.clip_len, self.eval_clips
                ).probabilities
                for x in X
            ]
        )

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
