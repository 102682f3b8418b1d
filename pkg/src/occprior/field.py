"""Hash-grid radiance field: encoding, a density head and a color head."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .hashgrid import FeatureTables, HashGridConfig, encode, encode_backward
from .render import scaled_density, scaled_density_backward
from .tensor import (Mlp, mlp_backward, mlp_eval, mlp_forward, read_mlp_params, read_params_header,
                     write_mlp_params, write_params_header)


@dataclass
class ModelConfig:
    grid: HashGridConfig = field(default_factory=HashGridConfig)
    hidden_width: int = 64
    geo_features: int = 15  # extra density-head outputs fed to the color head
    sh_degree: int = 4  # view-direction encoding; 0 disables view dependence
    density_scale: float = 100.0

    @property
    def dir_dim(self) -> int:
        return self.sh_degree**2


def sh_encode(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real spherical harmonics of unit directions up to ``degree`` bands (max 4)."""
    if degree == 0:
        return np.zeros((len(dirs), 0), dtype=dirs.dtype)
    if not 1 <= degree <= 4:
        raise ValueError("sh_degree must be in 0..4")
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    out = [np.full_like(x, 0.28209479177387814)]
    if degree > 1:
        out += [-0.48860251190291987 * y, 0.48860251190291987 * z,
                -0.48860251190291987 * x]
    if degree > 2:
        out += [1.0925484305920792 * x * y, -1.0925484305920792 * y * z,
                0.94617469575755997 * zz - 0.31539156525251999,
                -1.0925484305920792 * x * z, 0.54627421529603959 * (xx - yy)]
    if degree > 3:
        out += [0.59004358992664352 * y * (-3.0 * xx + yy),
                2.8906114426405538 * x * y * z,
                0.45704579946446572 * y * (1.0 - 5.0 * zz),
                0.3731763325901154 * z * (5.0 * zz - 3.0),
                0.45704579946446572 * x * (1.0 - 5.0 * zz),
                1.4453057213202769 * z * (xx - yy),
                0.59004358992664352 * x * (-xx + 3.0 * yy)]
    return np.stack(out, axis=1)


@dataclass
class FieldTape:
    footprint: object
    density_tape: object
    color_tape: object
    raw: np.ndarray
    sigma: np.ndarray


class HashGridField:
    """Learnable scene model. ``query`` gives densities and colors at points."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.cfg = cfg
        g = cfg.grid
        self.tables = FeatureTables.create(g, rng, dtype=dtype)
        self.density_mlp = Mlp.create([g.output_dim, cfg.hidden_width, 1 + cfg.geo_features],
                                      rng, dtype=dtype)
        self.color_mlp = Mlp.create(
            [cfg.geo_features + cfg.dir_dim, cfg.hidden_width, cfg.hidden_width, 3],
            rng, output_activation="sigmoid", dtype=dtype)

    @property
    def dtype(self):
        return self.tables.data.dtype

    @property
    def density_scale(self) -> float:
        return self.cfg.density_scale

    def params(self) -> list[np.ndarray]:
        return self.density_mlp.params() + self.color_mlp.params() + [self.tables.data]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def astype(self, dtype) -> "HashGridField":
        out = object.__new__(HashGridField)
        out.cfg = self.cfg
        out.tables = self.tables.astype(dtype)
        out.density_mlp = self.density_mlp.astype(dtype)
        out.color_mlp = self.color_mlp.astype(dtype)
        return out

    def copy(self) -> "HashGridField":
        return self.astype(self.dtype)

    def density(self, points: np.ndarray, chunk: int = 1 << 16) -> np.ndarray:
        """Scaled density only, no tape."""
        out = np.empty(len(points), dtype=np.float64)
        for s in range(0, len(points), chunk):
            feats, _ = encode(points[s:s + chunk], self.tables, self.cfg.grid, footprint=False)
            h = mlp_eval(self.density_mlp, feats)
            out[s:s + chunk] = scaled_density(h[:, 0], self.density_scale)
        return out

    def evaluate(self, points: np.ndarray, dirs: np.ndarray):
        """Density and color without recording a tape."""
        feats, _ = encode(points, self.tables, self.cfg.grid, footprint=False)
        h = mlp_eval(self.density_mlp, feats)
        rgb = mlp_eval(self.color_mlp, self._color_input(h, dirs))
        return scaled_density(h[:, 0], self.density_scale), rgb

    def _color_input(self, h, dirs):
        cin = h[:, 1:]
        if self.cfg.sh_degree:
            cin = np.concatenate([cin, sh_encode(dirs.astype(self.dtype),
                                                 self.cfg.sh_degree)], axis=1)
        return cin

    def query(self, points: np.ndarray, dirs: np.ndarray):
        """Density ``(n,)``, color ``(n, 3)`` and a tape for :meth:`backward`."""
        feats, footprint = encode(points, self.tables, self.cfg.grid)
        h, dtape = mlp_forward(self.density_mlp, feats)
        raw = h[:, 0]
        sigma = scaled_density(raw, self.density_scale)
        rgb, ctape = mlp_forward(self.color_mlp, self._color_input(h, dirs))
        return sigma, rgb, FieldTape(footprint, dtape, ctape, raw, sigma)

    def backward(self, tape: FieldTape, d_sigma: np.ndarray, d_rgb: np.ndarray):
        """Accumulate table gradients in place; return MLP gradients in ``params`` order
        (the table gradient is ``self.tables.grad``)."""
        cgrads, d_cin = mlp_backward(tape.color_tape, d_rgb.astype(self.dtype))
        d_h = np.empty(tape.density_tape.output.shape, dtype=self.dtype)
        d_h[:, 0] = scaled_density_backward(tape.raw, tape.sigma, d_sigma)
        d_h[:, 1:] = d_cin[:, :self.cfg.geo_features]
        dgrads, d_feats = mlp_backward(tape.density_tape, d_h)
        encode_backward(tape.footprint, d_feats, self.tables)
        return dgrads + cgrads

    def zero_grad(self):
        self.tables.zero_grad()

    # -- snapshot ------------------------------------------------------------

    def save(self, path):
        """INGW snapshot: header, density MLP, color MLP, then the feature tables."""
        g = self.cfg.grid
        extra = [g.n_levels, g.table_size, g.n_features, g.base_resolution,
                 g.max_resolution, self.cfg.sh_degree, self.cfg.geo_features]
        with open(path, "wb") as fh:
            write_params_header(fh, [self.density_mlp.dims, self.color_mlp.dims], extra)
            fh.write(struct.pack("<6f", *g.bbox_min, *g.bbox_max))
            fh.write(struct.pack("<f", self.density_scale))
            write_mlp_params(fh, self.density_mlp)
            write_mlp_params(fh, self.color_mlp)
            fh.write(np.ascontiguousarray(self.tables.data, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "HashGridField":
        with open(path, "rb") as fh:
            (ddims, cdims), extra = read_params_header(fh)
            L, T, F, nmin, nmax, sh, geo = extra
            box = struct.unpack("<6f", fh.read(24))
            (scale,) = struct.unpack("<f", fh.read(4))
            grid = HashGridConfig(L, T, F, nmin, nmax, tuple(box[:3]), tuple(box[3:]))
            cfg = ModelConfig(grid, hidden_width=ddims[1], geo_features=geo, sh_degree=sh,
                              density_scale=float(scale))
            out = object.__new__(cls)
            out.cfg = cfg
            out.density_mlp = read_mlp_params(fh, ddims)
            out.color_mlp = read_mlp_params(fh, cdims, output_activation="sigmoid")
            n = L * T * F
            data = np.frombuffer(fh.read(4 * n), dtype="<f4")
            if data.size != n:
                raise ValueError(f"{path}: truncated feature tables")
            out.tables = FeatureTables(data.reshape(L, T, F).astype(np.float32))
        return out
