"""scikit-learn style wrappers around meta-training and sparse few-shot adaptation."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .arch import build_backbone, init_params
from .cost import Budget, fits, plan_cost
from .episodes import Episode
from .finetune import embed, fine_tune
from .plan import UpdatePlan
from .protonet import classify, compute_prototypes
from .rng import stream
from .training import MetaSchedule, build_plan, meta_train


def check_images(X, spec=None):
    """Validate an (N, C, H, W) batch of finite images and return it as float32."""
    X = np.asarray(X)
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (N, C, H, W), got {X.shape}")
    if len(X) == 0:
        raise ValueError("need at least one image")
    if not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"images must be numeric, got dtype {X.dtype}")
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinity")
    if spec is not None and tuple(X.shape[1:]) != tuple(spec.input_shape):
        raise ValueError(f"images are {X.shape[1:]}, model expects {spec.input_shape}")
    return X


def check_labels(y, n):
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    return y


class ProtoEmbedder(TransformerMixin, BaseEstimator):
    """Backbone meta-trained with episodic prototype loss; ``transform`` returns embeddings.

    Parameters
    ----------
    family, width, blocks, channels, feature_dim : backbone description.
    epochs, episodes_per_epoch, warmup_epochs, base_lr, peak_lr, final_lr, momentum :
        meta-training schedule (linear warm-up then cosine annealing).
    way, shot, query, temperature : episode shape and softmax temperature.
    seed : root seed for initialisation and episode sampling.
    """

    def __init__(self, family="micro-cnn", width=1.0, blocks=2, channels=8, feature_dim=16, epochs=20,
                 episodes_per_epoch=100, warmup_epochs=1, base_lr=1e-3, peak_lr=0.05, final_lr=1e-3,
                 momentum=0.9, way=5, shot=5, query=5, temperature=0.1, seed=0):
        self.family = family
        self.width = width
        self.blocks = blocks
        self.channels = channels
        self.feature_dim = feature_dim
        self.epochs = epochs
        self.episodes_per_epoch = episodes_per_epoch
        self.warmup_epochs = warmup_epochs
        self.base_lr = base_lr
        self.peak_lr = peak_lr
        self.final_lr = final_lr
        self.momentum = momentum
        self.way = way
        self.shot = shot
        self.query = query
        self.temperature = temperature
        self.seed = seed

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X))
        self.spec_ = build_backbone(self.family, self.width, X.shape[1:], blocks=self.blocks,
                                    channels=self.channels, feature_dim=self.feature_dim)
        params = init_params(self.spec_, stream(self.seed, "init"))
        schedule = MetaSchedule(self.epochs, self.episodes_per_epoch, self.warmup_epochs, self.base_lr,
                                self.peak_lr, self.final_lr, self.momentum, self.way, self.shot, self.query,
                                self.temperature)
        self.params_, self.loss_curve_ = meta_train(self.spec_, params, X, y, schedule, self.seed)
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        return embed(self.spec_, self.params_, check_images(X, self.spec_))


class SparseFewShotClassifier(ClassifierMixin, BaseEstimator):
    """Nearest-prototype classifier that sparsely fine-tunes a backbone on its support set.

    ``fit(X_support, y_support)`` selects a plan (``plan_source``) under the memory and
    compute budget, fine-tunes it for ``iters`` steps on pseudo-query batches and stores
    the class prototypes. ``predict`` embeds queries with the tuned weights.

    Parameters
    ----------
    spec, params : backbone description and weights (e.g. from a checkpoint).
    plan_source : "tinytrain", "full", "last-layer", "random-channels", "l2norm-channels",
        "none" or "file" (with ``plan``).
    budget_mem : byte limit or None.
    budget_mac : absolute backward MAC limit, or a float in (0, 1] read as a fraction of
        the forward MACs, or None.
    """

    def __init__(self, spec=None, params=None, plan_source="tinytrain", budget_mem=None, budget_mac=None,
                 channel_ratio=0.5, iters=40, lr=1e-3, momentum=0.9, temperature=0.1, augment=None,
                 include_bias=True, plan=None, seed=0):
        self.spec = spec
        self.params = params
        self.plan_source = plan_source
        self.budget_mem = budget_mem
        self.budget_mac = budget_mac
        self.channel_ratio = channel_ratio
        self.iters = iters
        self.lr = lr
        self.momentum = momentum
        self.temperature = temperature
        self.augment = augment
        self.include_bias = include_bias
        self.plan = plan
        self.seed = seed

    def _budget(self):
        mac = self.budget_mac
        if isinstance(mac, float) and mac <= 1:
            return Budget(self.budget_mem, None, mac)
        return Budget(self.budget_mem, mac, None)

    def fit(self, X, y):
        if self.spec is None or self.params is None:
            raise ValueError("spec and params are required")
        X = check_images(X, self.spec)
        y = check_labels(y, len(X))
        self.classes_, local = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes in the support set")
        episode = Episode(X, local, X[:0], local[:0], np.arange(len(self.classes_)),
                          np.bincount(local))
        budget = self._budget()
        plan = build_plan(self.spec, self.params, episode, self.plan_source, budget,
                          channel_ratio=self.channel_ratio, temperature=self.temperature, seed=self.seed,
                          augment=self.augment, plan=self.plan, include_bias=self.include_bias)
        cost = plan_cost(self.spec, plan)
        if not fits(cost, budget):
            plan = UpdatePlan(budget=budget.to_dict(), source=plan.source,
                              warning=f"{plan.source} plan exceeds the budget; running without updates")
            cost = plan_cost(self.spec, plan)
        self.plan_, self.cost_ = plan, cost
        self.params_ = fine_tune(self.spec, self.params, episode, plan, iters=self.iters, lr=self.lr,
                                 momentum=self.momentum, temperature=self.temperature, seed=self.seed,
                                 augment=self.augment)
        self.prototypes_ = compute_prototypes(embed(self.spec, self.params_, X), local)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "prototypes_")
        feats = embed(self.spec, self.params_, check_images(X, self.spec))
        return classify(feats, self.prototypes_, self.temperature)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
