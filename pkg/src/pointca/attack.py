"""Geometry and latent completion attacks, plus the two noise baselines.

The attack starts from a slightly noised copy of the source partial cloud and
runs signed-gradient descent on a similarity loss toward the target. After
every step each point's displacement is projected back into its budget ball.
With the adaptive budget the ball radii come from the kNN density profile of
the *clean* source cloud, computed once before the loop.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import InvalidConfig, ModelUntrained
from .geometry import (
    BUDGET_KINDS,
    NeighborProfile,
    Perturbation,
    PointCloud,
    as_points,
    build_neighbor_profile,
    clip_channelwise,
    clip_pointwise_l2,
    clip_to_budget,
)
from .metrics import MetricReport, chamfer, emd, outlier_count, perturbation_budget

logger = logging.getLogger(__name__)

MODES = ("geometry", "latent")
LATENT_TERMS = ("both", "l2", "kl")

# lambda presets for four full-size completion networks; not used by default
LAMBDA_PRESETS = {"PCN": 1000.0, "RFA": 20.0, "GRNet": 0.05, "VRCNet": 20.0}


@dataclass
class AttackConfig:
    mode: str = "geometry"
    iterations: int = 200
    k: int = 8
    t: float = 3.0
    eta: float = 5.0
    base_step: float = 0.01
    decay_rate: float = 0.7
    decay_step: int = 20
    lam: float = 20.0
    latent_terms: str = "both"
    budget_kind: str = "adaptive"
    eps: float = 0.05
    init_noise_scale: float = 0.01
    noise_std: float = 0.02
    seed: int = 0

    def validate(self):
        if self.mode not in MODES:
            raise InvalidConfig(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iterations < 0:
            raise InvalidConfig("iterations must be >= 0")
        if not self.base_step > 0:
            raise InvalidConfig("base_step must be > 0")
        if not 0 < self.decay_rate <= 1:
            raise InvalidConfig("decay_rate must lie in (0, 1]")
        if self.decay_step < 1:
            raise InvalidConfig("decay_step must be >= 1")
        if self.lam < 0:
            raise InvalidConfig("lam must be >= 0")
        if self.latent_terms not in LATENT_TERMS:
            raise InvalidConfig(f"latent_terms must be one of {LATENT_TERMS}")
        if self.budget_kind not in BUDGET_KINDS:
            raise InvalidConfig(f"budget_kind must be one of {BUDGET_KINDS}")
        if self.k < 2 or self.t < 0 or not self.eta > 0:
            raise InvalidConfig("need k >= 2, t >= 0 and eta > 0")
        if self.eps < 0 or self.init_noise_scale < 0 or self.noise_std < 0:
            raise InvalidConfig("eps, init_noise_scale and noise_std must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown attack config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def step_size(self, q):
        """Step size at zero-based iteration ``q``."""
        return self.base_step * self.decay_rate ** (q // self.decay_step)


@dataclass
class AttackResult:
    adversarial: PointCloud
    loss_trace: list
    config_echo: AttackConfig
    metrics: Optional[MetricReport] = None
    extra: dict = field(default_factory=dict)


@dataclass
class AttackPair:
    """Everything needed to run and score one source-to-target attack."""

    pair_id: str
    source_partial: PointCloud
    source_gt: PointCloud
    target_partial: PointCloud
    target_gt: PointCloud
    source_class: str = ""
    target_class: str = ""
    t_nre_denominator: Optional[float] = None
    s_nre_denominator: Optional[float] = None


def pair_seed(campaign_seed, pair_id):
    """Per-pair seed that depends on the pair id only, never on scheduling."""
    return int(np.random.SeedSequence([int(campaign_seed), zlib.crc32(pair_id.encode())]).generate_state(1)[0])


def _require_trained(model):
    if not getattr(model, "trained", False):
        raise ModelUntrained(f"{type(model).__name__} has not been trained or loaded")


# --------------------------------------------------------------------------
# losses


def geometry_loss(model, adv, target_gt):
    """CD_P between the completion of ``adv`` and the complete target."""
    out = model.complete(adv)
    return ad.differentiable_chamfer(out, ad.Tensor(as_points(target_gt)))


def latent_loss(model, adv, target_partial, lam=20.0, terms="both", target_feature=None):
    """Feature-space distance to the target partial's encoding.

    ``||En(adv) - En(Y^P)||_2 + lam * KL(softmax En(Y^P) || softmax En(adv))``.
    ``terms`` selects the L2 term, the KL term, or both.
    """
    if target_feature is None:
        with ad.no_grad():
            target_feature = model.encode(as_points(target_partial)).values
    feat = model.encode(adv)
    tgt = ad.Tensor(target_feature)
    parts = []
    if terms in ("both", "l2"):
        parts.append(ad.l2_norm_rows(ad.sub(feat, tgt)))
    if terms in ("both", "kl"):
        scale = lam if terms == "both" else 1.0
        parts.append(ad.mul(ad.differentiable_kl(tgt, feat), scale))
    loss = parts[0]
    for p in parts[1:]:
        loss = ad.add(loss, p)
    return loss


# --------------------------------------------------------------------------
# projection


def project(delta, cfg: AttackConfig, profile: Optional[NeighborProfile]):
    pert = Perturbation(delta, cfg.budget_kind)
    if cfg.budget_kind == "adaptive":
        return clip_to_budget(pert, profile).delta
    if cfg.budget_kind == "pointwise_l2":
        return clip_pointwise_l2(pert, cfg.eps).delta
    return clip_channelwise(pert, cfg.eps).delta


def budget_violation(delta, cfg: AttackConfig, profile: Optional[NeighborProfile]) -> float:
    """Largest amount by which any point exceeds its budget (<= 0 when feasible)."""
    delta = np.asarray(delta)
    if cfg.budget_kind == "channelwise_linf":
        return float(np.abs(delta).max() - cfg.eps)
    norms = np.linalg.norm(delta, axis=1)
    radius = profile.epsilon if cfg.budget_kind == "adaptive" else cfg.eps
    return float((norms - radius).max())


def _profile_for(source, cfg):
    if cfg.budget_kind != "adaptive":
        return None
    return build_neighbor_profile(source, cfg.k, cfg.t, cfg.eta)


# --------------------------------------------------------------------------
# attacks


def run_pointca(model, source_partial, target, cfg: AttackConfig, on_step=None) -> AttackResult:
    """Run the completion attack.

    ``target`` is the complete target cloud in geometry mode and the partial
    target cloud in latent mode. ``on_step(q, adv_points, delta, profile)`` is
    called after each projected update.
    """
    cfg.validate()
    _require_trained(model)
    source = as_points(source_partial)
    target_pts = as_points(target)
    profile = _profile_for(source, cfg)
    rng = np.random.default_rng(cfg.seed)
    s = cfg.init_noise_scale
    delta = project(rng.uniform(-s, s, size=source.shape), cfg, profile)
    adv = source + delta
    target_feature = None
    if cfg.mode == "latent":
        with ad.no_grad():
            target_feature = model.encode(target_pts).values
    trace = []
    for q in range(cfg.iterations):
        x = ad.Tensor(adv, requires_grad=True)
        if cfg.mode == "geometry":
            loss = geometry_loss(model, x, target_pts)
        else:
            loss = latent_loss(model, x, None, cfg.lam, cfg.latent_terms, target_feature)
        ad.backward(loss)
        trace.append(loss.item())
        adv = adv - cfg.step_size(q) * np.sign(x.grad)
        delta = project(adv - source, cfg, profile)
        adv = source + delta
        if on_step is not None:
            on_step(q, adv, delta, profile)
    label = source_partial.label if isinstance(source_partial, PointCloud) else None
    result = AttackResult(PointCloud(adv, label=label, kind="adversarial"), trace, cfg)
    result.extra["profile"] = profile
    return result


def final_loss(model, adv, target, cfg: AttackConfig) -> float:
    with ad.no_grad():
        if cfg.mode == "geometry":
            return geometry_loss(model, ad.Tensor(as_points(adv)), target).item()
        return latent_loss(model, ad.Tensor(as_points(adv)), target, cfg.lam, cfg.latent_terms).item()


def random_noise_baseline(source_partial, cfg: AttackConfig) -> AttackResult:
    """Gaussian noise (std ``cfg.noise_std``) projected into the same budget."""
    cfg.validate()
    source = as_points(source_partial)
    profile = _profile_for(source, cfg)
    rng = np.random.default_rng(cfg.seed)
    delta = project(rng.normal(0.0, cfg.noise_std, size=source.shape), cfg, profile)
    label = source_partial.label if isinstance(source_partial, PointCloud) else None
    result = AttackResult(PointCloud(source + delta, label=label, kind="adversarial"), [], cfg)
    result.extra["profile"] = profile
    return result


def classification_noise_baseline(classifier, source_partial, true_class, cfg: AttackConfig) -> AttackResult:
    """Targeted signed-gradient attack on the classifier under the same budget.

    A random wrong class is drawn from ``cfg.seed``; cross-entropy toward it is
    minimized for ``cfg.iterations`` steps with the configured step schedule.
    """
    cfg.validate()
    _require_trained(classifier)
    source = as_points(source_partial)
    profile = _profile_for(source, cfg)
    rng = np.random.default_rng(cfg.seed)
    wrong = [c for c in range(classifier.n_classes) if c != true_class]
    goal = int(rng.choice(wrong))
    s = cfg.init_noise_scale
    delta = project(rng.uniform(-s, s, size=source.shape), cfg, profile)
    adv = source + delta
    trace = []
    for q in range(cfg.iterations):
        x = ad.Tensor(adv, requires_grad=True)
        loss = ad.cross_entropy(classifier.logits(x), goal)
        ad.backward(loss)
        trace.append(loss.item())
        adv = adv - cfg.step_size(q) * np.sign(x.grad)
        adv = source + project(adv - source, cfg, profile)
    label = source_partial.label if isinstance(source_partial, PointCloud) else None
    result = AttackResult(PointCloud(adv, label=label, kind="adversarial"), trace, cfg)
    result.extra.update(profile=profile, goal_class=goal, predicted=classifier.predict(adv))
    return result


# --------------------------------------------------------------------------
# scoring


def denominators(model, pair: AttackPair):
    """Clean reconstruction errors ``CD_P(f(Y^P), Y)`` and ``CD_P(f(X^P), X)``."""
    t_den = chamfer(model.predict(as_points(pair.target_partial)), pair.target_gt)
    s_den = chamfer(model.predict(as_points(pair.source_partial)), pair.source_gt)
    return t_den, s_den


def score(model, pair: AttackPair, adversarial, sor_k=2, sor_alpha=1.1, with_emd=True) -> MetricReport:
    """Full metric report of one adversarial partial cloud."""
    if pair.t_nre_denominator is None or pair.s_nre_denominator is None:
        pair.t_nre_denominator, pair.s_nre_denominator = denominators(model, pair)
    adv = as_points(adversarial)
    out = model.predict(adv)
    t_re = chamfer(out, pair.target_gt)
    s_re = chamfer(out, pair.source_gt)
    return MetricReport(
        t_re_cd=t_re,
        t_re_emd=emd(out, pair.target_gt) if with_emd else 0.0,
        t_nre_cd=t_re / pair.t_nre_denominator,
        t_nre_denominator=pair.t_nre_denominator,
        s_re=s_re,
        s_nre=s_re / pair.s_nre_denominator,
        perturbation_budget_cd=perturbation_budget(adv, pair.source_partial),
        outlier_count=outlier_count(adv, sor_k, sor_alpha),
    )


def attack_pair(model, pair: AttackPair, cfg: AttackConfig, method="pointca", classifier=None,
                with_emd=True) -> AttackResult:
    """Run one method on one pair and attach its metric report.

    ``method`` is ``pointca`` (mode taken from ``cfg``), ``random`` or
    ``classification``.
    """
    if method == "pointca":
        target = pair.target_gt if cfg.mode == "geometry" else pair.target_partial
        result = run_pointca(model, pair.source_partial, target, cfg)
    elif method == "random":
        _require_trained(model)
        result = random_noise_baseline(pair.source_partial, cfg)
    elif method == "classification":
        _require_trained(model)
        true_class = classifier.class_names.index(pair.source_class)
        result = classification_noise_baseline(classifier, pair.source_partial, true_class, cfg)
    else:
        raise InvalidConfig(f"unknown attack method {method!r}")
    result.metrics = score(model, pair, result.adversarial, with_emd=with_emd)
    return result


def transfer_evaluate(results, pairs, other_model) -> float:
    """Mean T-RE of ``other_model`` completing adversarial clouds made elsewhere."""
    _require_trained(other_model)
    vals = [
        chamfer(other_model.predict(as_points(r.adversarial)), p.target_gt)
        for r, p in zip(results, pairs)
    ]
    return float(np.mean(vals))


def config_to_dict(cfg: AttackConfig):
    return asdict(cfg)
