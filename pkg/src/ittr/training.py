"""Adam optimizer, learning-rate schedule, and the alternating training loop.

Each iteration updates the discriminator on detached translations first,
then the generator (and projection heads) on the combined adversarial +
contrastive objective against the freshly updated discriminator. All
randomness flows from one seeded generator, so runs are reproducible and
checkpoints restore the exact stream position.
"""

import json
import os
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .data import save_image, unpaired_iterator
from .generator import GeneratorSpec, load_generator, save_generator
from .objectives import (LossBundle, PatchGanDiscriminator, ProjectionHeadBank,
                         lsgan_discriminator_loss, total_generator_objective)
from .serialization import load_tensors, save_tensors
from .tensor import Tensor

HISTORY_HEADER = "iter,lr,loss_g,loss_nce_x,loss_nce_y,loss_d"


@dataclass
class TrainConfig:
    lr: float = 2e-4
    epochs: int = 200            # constant phase; decay runs to 2 * epochs
    batch: int = 1
    iters: int = 2000            # desk-scale iteration cap
    seed: int = 0
    tau: float = 0.07
    num_patches: int = 256
    lambda_x: float = 1.0
    lambda_y: float = 1.0
    checkpoint_every: int = 500
    sample_every: int = 250

    def to_manifest_dict(self):
        return {f"train.{f.name}": getattr(self, f.name) for f in fields(self)}


def lr_at(config: TrainConfig, epoch_float):
    """Constant for the first ``epochs``, then linear decay to 0 at 2*epochs."""
    e = config.epochs
    if not 0.0 <= epoch_float <= 2.0 * e:
        raise ValueError(f"epoch {epoch_float} outside [0, {2 * e}]")
    if epoch_float < e:
        return config.lr
    return config.lr * (2.0 * e - epoch_float) / e


class Adam:
    """Adam with the beta1=0.5 GAN convention; parameters tracked by name."""

    def __init__(self, named_params, beta1=0.5, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.params = {}
        self.m = {}
        self.v = {}
        self.add_params(named_params)

    def add_params(self, named_params):
        for name, p in named_params:
            if name in self.params:
                continue
            self.params[name] = p
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise T.ShapeError(
                    f"grad shape {g.shape} != param shape {p.data.shape} for {name}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self, prefix):
        out = {}
        for name in self.params:
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, prefix, arrays, t):
        self.t = t
        for name, p in self.params.items():
            m = arrays[f"{prefix}.m.{name}"]
            v = arrays[f"{prefix}.v.{name}"]
            if m.shape != p.data.shape:
                raise T.ShapeError(f"moment shape mismatch for {name}")
            self.m[name] = m.astype(p.data.dtype)
            self.v[name] = v.astype(p.data.dtype)


def adam_step(params, grads, state, lr):
    """Functional single step on plain arrays; returns updated copies.

    ``state`` is a dict with keys m (list), v (list), t (int); a fresh state
    is ``{"m": [zeros...], "v": [zeros...], "t": 0}``.
    """
    beta1, beta2, eps = 0.5, 0.999, 1e-8
    t = state["t"] + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise T.ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        new_params.append(p - lr * mhat / (np.sqrt(vhat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, {"m": new_m, "v": new_v, "t": t}


class TrainState:
    """Everything the loop mutates: nets, heads, optimizers, rng, counter."""

    def __init__(self, gen_spec: GeneratorSpec, config: TrainConfig):
        self.config = config
        self.gen_spec = gen_spec
        self.gen = gen_spec.build(seed=config.seed)
        self.disc = PatchGanDiscriminator(rng=np.random.default_rng(config.seed + 1))
        self.bank = ProjectionHeadBank(seed=config.seed + 2)
        self.opt_g = Adam((f"gen.{n}", p) for n, p in self.gen.named_parameters())
        self.opt_d = Adam((f"disc.{n}", p) for n, p in self.disc.named_parameters())
        self.rng = np.random.default_rng(config.seed + 3)
        self.iteration = 0

    def current_lr(self, iters_per_epoch):
        epoch = self.iteration / max(1, iters_per_epoch)
        return lr_at(self.config, min(epoch, 2.0 * self.config.epochs))


def train_step(state: TrainState, xa, yb, lr=None) -> LossBundle:
    """One alternating update; returns the realized loss bundle.

    Aborts with a diagnostic when any loss goes non-finite, before the
    offending update is applied.
    """
    cfg = state.config
    if lr is None:
        lr = cfg.lr
    dt = T.get_default_dtype()
    xa = np.asarray(xa, dtype=dt)
    yb = np.asarray(yb, dtype=dt)
    b = xa.shape[0]

    if cfg.lambda_y != 0.0:
        # translation and identity branches share one batched pass
        both, feats_src = state.gen(Tensor(np.concatenate([xa, yb])),
                                    return_features=True)
        first, second = list(range(b)), list(range(b, 2 * b))
        fake = T.index_select(both, first, axis=0)
        idt = T.index_select(both, second, axis=0)
        feats_x_src = [T.index_select(f, first, axis=0) for f in feats_src]
        feats_y_src = [T.index_select(f, second, axis=0) for f in feats_src]
    else:
        fake, feats_x_src = state.gen(Tensor(xa), return_features=True)
        idt, feats_y_src = None, None

    # discriminator first, against detached translations
    y = Tensor(yb)
    d_real = state.disc(y)
    d_fake_detached = state.disc(fake.detach())
    loss_d = lsgan_discriminator_loss(d_real, d_fake_detached)
    if not np.isfinite(loss_d.item()):
        raise T.NumericError(
            f"iteration {state.iteration + 1}: non-finite discriminator loss")
    state.opt_d.zero_grad()
    loss_d.backward()
    state.opt_d.step(lr)
    state.opt_d.zero_grad()

    # generator + heads against the updated discriminator
    d_fake = state.disc(fake)
    if idt is not None:
        _, feats_out = state.gen.encode(T.concat([fake, idt], axis=0))
        feats_x_out = [T.index_select(f, first, axis=0) for f in feats_out]
        feats_y_out = [T.index_select(f, second, axis=0) for f in feats_out]
    else:
        _, feats_x_out = state.gen.encode(fake)
        feats_y_out = None
    bundle = total_generator_objective(
        d_fake, feats_x_src, feats_x_out, feats_y_src, feats_y_out, state.bank,
        tau=cfg.tau, num_patches=cfg.num_patches, rng=state.rng,
        lambda_x=cfg.lambda_x, lambda_y=cfg.lambda_y)
    bundle.loss_d = loss_d.detach()
    scalars = bundle.scalars()
    if not all(np.isfinite(v) for v in scalars.values()):
        raise T.NumericError(
            f"iteration {state.iteration + 1}: non-finite losses {scalars}")
    state.opt_g.add_params((f"heads.{n}", p)
                           for n, p in state.bank.named_parameters())
    state.opt_g.zero_grad()
    bundle.loss_total.backward()
    state.opt_g.step(lr)
    state.opt_g.zero_grad()

    state.iteration += 1
    return bundle


# -- checkpointing ----------------------------------------------------------

def save_checkpoint(prefix, state: TrainState):
    """``<prefix>.gen`` for translation plus ``<prefix>.train`` to resume."""
    dtype = next(iter(state.gen.parameters())).data.dtype
    save_generator(f"{prefix}.gen", state.gen)

    arrays = {}
    arrays.update({f"disc.{n}": p.data for n, p in state.disc.named_parameters()})
    arrays.update({f"heads.{n}": p.data for n, p in state.bank.named_parameters()})
    arrays.update({f"gen.{n}": p.data for n, p in state.gen.named_parameters()})
    arrays.update(state.opt_g.state_arrays("opt_g"))
    arrays.update(state.opt_d.state_arrays("opt_d"))
    save_tensors(f"{prefix}.train", arrays, dtype=dtype)

    manifest = state.gen_spec.to_manifest()
    manifest += f"precision={np.dtype(dtype).name}\n"
    manifest += f"iteration={state.iteration}\n"
    manifest += f"opt_g_t={state.opt_g.t}\n"
    manifest += f"opt_d_t={state.opt_d.t}\n"
    manifest += f"head_dims={','.join(str(h.fc1.in_features) for h in state.bank.heads)}\n"
    manifest += f"rng_state={json.dumps(state.rng.bit_generator.state)}\n"
    for key, value in state.config.to_manifest_dict().items():
        manifest += f"{key}={value}\n"
    tmp = f"{prefix}.train.manifest.tmp"
    with open(tmp, "w") as fh:
        fh.write(manifest)
    os.replace(tmp, f"{prefix}.train.manifest")


def load_checkpoint(prefix) -> TrainState:
    with open(f"{prefix}.train.manifest") as fh:
        text = fh.read()
    entries = {}
    for line in text.splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            entries[key] = value

    gen_spec = GeneratorSpec.from_manifest(text)
    kwargs = {}
    for f in fields(TrainConfig):
        key = f"train.{f.name}"
        if key in entries:
            caster = f.type if isinstance(f.type, type) else {"int": int, "float": float}[f.type]
            kwargs[f.name] = caster(entries[key])
    config = TrainConfig(**kwargs)
    state = TrainState(gen_spec, config)
    state.iteration = int(entries["iteration"])

    dtype = np.dtype(entries.get("precision", "float32"))
    arrays = load_tensors(f"{prefix}.train", dtype=dtype)
    state.gen.load_state_dict({n[len("gen."):]: a for n, a in arrays.items()
                               if n.startswith("gen.")})
    state.disc.load_state_dict({n[len("disc."):]: a for n, a in arrays.items()
                                if n.startswith("disc.")})
    head_dims = [int(d) for d in entries.get("head_dims", "").split(",") if d]
    state.bank.ensure(len(head_dims), head_dims)
    if head_dims:
        state.bank.load_state_dict({n[len("heads."):]: a for n, a in arrays.items()
                                    if n.startswith("heads.")})
        state.opt_g.add_params((f"heads.{n}", p)
                               for n, p in state.bank.named_parameters())
    state.opt_g.load_state_arrays("opt_g", arrays, int(entries["opt_g_t"]))
    state.opt_d.load_state_arrays("opt_d", arrays, int(entries["opt_d_t"]))
    state.rng.bit_generator.state = json.loads(entries["rng_state"])
    return state


def _sample_grid(gen, images):
    """Inputs over outputs, tiled horizontally: [3, 2H, k*W]."""
    with T.no_grad():
        outs = gen(Tensor(np.asarray(images, dtype=T.get_default_dtype()))).data
    top = np.concatenate(list(np.asarray(images)), axis=2)
    bottom = np.concatenate(list(outs), axis=2)
    return np.concatenate([top, bottom], axis=1)


def run_training(config: TrainConfig, domain_a, domain_b, out_dir,
                 gen_spec: GeneratorSpec = None, resume_from=None,
                 log_fn=None):
    """Train for ``config.iters`` iterations; returns (ckpt_prefix, history).

    Writes ``history.csv`` (one row per iteration), periodic checkpoints,
    and sample translation grids into ``out_dir``.
    """
    os.makedirs(out_dir, exist_ok=True)
    if resume_from is not None:
        state = load_checkpoint(resume_from)
    else:
        state = TrainState(gen_spec or GeneratorSpec(), config)
    config = state.config
    iters_per_epoch = max(1, len(domain_a) // config.batch)
    stream = unpaired_iterator(domain_a, domain_b, batch=config.batch,
                               seed=config.seed, start_step=state.iteration)
    preview = np.stack([domain_a[i % len(domain_a)] for i in range(4)])

    history_path = os.path.join(out_dir, "history.csv")
    mode = "a" if (resume_from is not None and os.path.exists(history_path)) else "w"
    history = []
    ckpt_prefix = None
    with open(history_path, mode) as hist:
        if mode == "w":
            hist.write(HISTORY_HEADER + "\n")
        while state.iteration < config.iters:
            xa, yb = next(stream)
            lr = state.current_lr(iters_per_epoch)
            bundle = train_step(state, xa, yb, lr=lr)
            row = bundle.scalars()
            row.update(iter=state.iteration, lr=lr)
            history.append(row)
            hist.write(f"{state.iteration},{lr:.8g},{row['loss_g']:.8g},"
                       f"{row['loss_nce_x']:.8g},{row['loss_nce_y']:.8g},"
                       f"{row['loss_d']:.8g}\n")
            hist.flush()
            if log_fn is not None:
                log_fn(row)
            if config.sample_every and state.iteration % config.sample_every == 0:
                grid = _sample_grid(state.gen, preview)
                save_image(grid, os.path.join(
                    out_dir, f"samples_{state.iteration:06d}.png"))
            if (config.checkpoint_every
                    and state.iteration % config.checkpoint_every == 0):
                ckpt_prefix = os.path.join(
                    out_dir, f"ckpt_{state.iteration:06d}")
                save_checkpoint(ckpt_prefix, state)
    ckpt_prefix = os.path.join(out_dir, f"ckpt_{state.iteration:06d}")
    save_checkpoint(ckpt_prefix, state)
    return ckpt_prefix, history
