"""Semi-supervised VAE with a partitioned latent (label y, nuisance z).

The encoder outputs a single head of width dim_y + dim_z which is split into
the two posterior means; all three Gaussians (q(y|x), q(z|x), p(x|y,z)) share
one fixed scalar variance. The decoder consumes the concatenation of y and z,
so feeding it ground-truth labels uses exactly the same parameters as feeding
it inferred ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn

CHECKPOINT_MAGIC = b"LARVAE-CKPT v1"


@dataclass(frozen=True)
class LatentPartition:
    """Sizes of the label and nuisance portions of the latent."""

    dim_y: int
    dim_z: int

    def __post_init__(self):
        if self.dim_y < 1:
            raise ValueError(f"dim_y must be >= 1, got {self.dim_y}")
        if self.dim_z < 0:
            raise ValueError(f"dim_z must be >= 0, got {self.dim_z}")

    @property
    def total(self):
        return self.dim_y + self.dim_z


def reparameterize(g, eps):
    """mean + sqrt(sigma2) * eps; gradient flows to the mean only."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != g.mean.shape:
        raise ad.ShapeError("reparameterize", g.mean.shape, eps.shape)
    return ad.add(g.mean, ad.constant(math.sqrt(g.sigma2) * eps))


def mlp_specs(image_shape, latent_dim, hidden=(128, 64)):
    c, h, w = image_shape
    pixels = c * h * w
    enc = [nn.flatten_layer()]
    prev = pixels
    for width in hidden:
        enc += [nn.dense(prev, width), nn.relu_layer()]
        prev = width
    enc.append(nn.dense(prev, latent_dim))
    dec = []
    prev = latent_dim
    for width in reversed(hidden):
        dec += [nn.dense(prev, width), nn.relu_layer()]
        prev = width
    dec += [nn.dense(prev, pixels), nn.reshape_layer(image_shape)]
    return enc, dec


def cnn_specs(image_shape, latent_dim):
    # Conv stack pattern scaled to 16x16 inputs: 4x4 kernels, stride 2,
    # instance norm + relu after each conv, dense head of width latent_dim.
    c, h, w = image_shape
    if h % 8 or w % 8:
        raise ValueError(f"cnn arch needs spatial dims divisible by 8, got {image_shape}")
    hb, wb = h // 8, w // 8
    flat = 64 * hb * wb
    enc = [
        nn.conv(c, 32, 4, stride=2, padding=1), nn.instance_norm_layer(), nn.relu_layer(),
        nn.conv(32, 32, 4, stride=2, padding=1), nn.instance_norm_layer(), nn.relu_layer(),
        nn.conv(32, 64, 4, stride=2, padding=1), nn.instance_norm_layer(), nn.relu_layer(),
        nn.flatten_layer(),
        nn.dense(flat, 256), nn.relu_layer(),
        nn.dense(256, latent_dim),
    ]
    dec = [
        nn.dense(latent_dim, 256), nn.relu_layer(),
        nn.dense(256, flat), nn.relu_layer(),
        nn.reshape_layer((64, hb, wb)),
        nn.transposed_conv(64, 32, 4, stride=2, padding=1), nn.instance_norm_layer(), nn.relu_layer(),
        nn.transposed_conv(32, 32, 4, stride=2, padding=1), nn.instance_norm_layer(), nn.relu_layer(),
        nn.transposed_conv(32, c, 4, stride=2, padding=1),
    ]
    return enc, dec


class SemiVAE:
    """Encoder/decoder pair over the partitioned latent xi = (y, z)."""

    def __init__(self, image_shape, dim_y, dim_z=5, sigma2=0.1, arch="mlp",
                 hidden=(128, 64), seed=0):
        self.image_shape = tuple(image_shape)
        self.partition = LatentPartition(dim_y, dim_z)
        self.sigma2 = float(sigma2)
        self.arch = arch
        self.hidden = tuple(hidden)
        if arch == "mlp":
            self.enc_spec, self.dec_spec = mlp_specs(self.image_shape, self.partition.total, hidden)
        elif arch == "cnn":
            self.enc_spec, self.dec_spec = cnn_specs(self.image_shape, self.partition.total)
        else:
            raise ValueError(f"unknown arch {arch!r}")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.params = nn.init_params(self.enc_spec, rng, prefix="enc.")
        self.params.update(nn.init_params(self.dec_spec, rng, prefix="dec."))

    @property
    def dim_y(self):
        return self.partition.dim_y

    @property
    def dim_z(self):
        return self.partition.dim_z

    def parameters(self):
        return self.params

    def encode(self, x):
        """x (B, C, H, W) -> (q(y|x), q(z|x)) posterior means with shared sigma2."""
        x = ad._as_tensor(x)
        if tuple(x.shape[1:]) != self.image_shape:
            raise ad.ShapeError("encode", x.shape, ("B",) + self.image_shape)
        head = nn.forward_stack(self.enc_spec, self.params, x, prefix="enc.")
        dy = self.partition.dim_y
        mu_y = ad.slice_last(head, 0, dy)
        mu_z = ad.slice_last(head, dy, self.partition.total)
        return nn.GaussianParams(mu_y, self.sigma2), nn.GaussianParams(mu_z, self.sigma2)

    def decode(self, y, z):
        """(y, z) -> p(x|y,z) with mean in [0,1] (sigmoid output)."""
        y, z = ad._as_tensor(y), ad._as_tensor(z)
        if y.shape[-1] != self.partition.dim_y or z.shape[-1] != self.partition.dim_z:
            raise ad.ShapeError("decode", y.shape, z.shape)
        xi = ad.concat_last(y, z)
        out = nn.forward_stack(self.dec_spec, self.params, xi, prefix="dec.")
        return nn.GaussianParams(ad.sigmoid(out), self.sigma2)

    def sample_latent(self, x, eps):
        """One reparameterized draw of the full latent; returns (y, z, posteriors)."""
        gy, gz = self.encode(x)
        dy = self.partition.dim_y
        y = reparameterize(gy, eps[:, :dy])
        z = reparameterize(gz, eps[:, dy:])
        return y, z, gy, gz


# ---------------------------------------------------------------------------
# checkpoint format: magic line, then per parameter (sorted by name) a text
# line "<name> <dim0> <dim1> ..." followed by raw little-endian float64 values.


def save_checkpoint(params, path):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + b"\n")
        for name in sorted(params):
            t = params[name]
            dims = " ".join(str(d) for d in t.shape)
            f.write(f"{name} {dims}".rstrip().encode() + b"\n")
            f.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint into {name: float64 array}."""
    with open(path, "rb") as f:
        blob = f.read()
    nl = blob.index(b"\n")
    if blob[:nl] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    pos = nl + 1
    out = {}
    while pos < len(blob):
        nl = blob.index(b"\n", pos)
        fields = blob[pos:nl].decode().split()
        name, dims = fields[0], tuple(int(d) for d in fields[1:])
        count = int(np.prod(dims)) if dims else 1
        pos = nl + 1
        raw = blob[pos:pos + 8 * count]
        if len(raw) != 8 * count:
            raise ValueError(f"{path}: truncated payload for {name}")
        out[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
        pos += 8 * count
    return out


def model_from_checkpoint(path, image_shape, dim_y, sigma2=0.1, hidden=(128, 64)):
    """Rebuild a SemiVAE from saved parameters.

    Architecture family is inferred from weight ranks (any 4-D encoder weight
    means the conv stack); dim_z from the encoder head width minus dim_y.
    """
    loaded = load_checkpoint(path)
    enc_dense = {n: a for n, a in loaded.items() if n.startswith("enc.") and n.endswith(".w") and a.ndim == 2}
    if not enc_dense:
        raise ValueError(f"{path}: no encoder head found")
    head = loaded[max(enc_dense)]
    arch = "cnn" if any(a.ndim == 4 and n.startswith("enc.") for n, a in loaded.items()) else "mlp"
    dim_z = head.shape[1] - dim_y
    if dim_z < 0:
        raise ValueError(f"{path}: head width {head.shape[1]} smaller than dim_y {dim_y}")
    if arch == "mlp":
        widths = [loaded[n].shape[1] for n in sorted(enc_dense)][:-1]
        hidden = tuple(widths) if widths else hidden
    model = SemiVAE(image_shape, dim_y, dim_z, sigma2=sigma2, arch=arch, hidden=hidden)
    for name, t in model.params.items():
        if name not in loaded:
            raise ValueError(f"{path}: missing parameter {name}")
        if loaded[name].shape != t.data.shape:
            raise ValueError(f"{path}: shape mismatch for {name}: "
                             f"{loaded[name].shape} vs {t.data.shape}")
        t.data = loaded[name]
    return model
