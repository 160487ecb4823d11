import numpy as np
import pytest
import torch

from stepstone.errors import ContractError
from stepstone.field import (
    FieldConfig,
    ImplicitDecoder,
    OccupancyGrid,
    decode,
    field_closure,
    load_decoder,
    save_decoder,
    snapshot_occupancy,
    split_decoder,
)

CFG = FieldConfig(latent_dim=16, width=24, hidden_layers=3, posenc_bands=4)


@pytest.fixture
def decoder():
    torch.manual_seed(0)
    return ImplicitDecoder(CFG)


@pytest.fixture
def latent():
    g = torch.Generator().manual_seed(1)
    return torch.randn(16, generator=g)


def test_fresh_decoder_outputs_strictly_inside_unit_interval(decoder, latent):
    pts = torch.rand(500, 3) - 0.5
    occ, rgb = decode(decoder, latent, pts)
    assert (occ > 0).all() and (occ < 1).all()
    assert (rgb > 0).all() and (rgb < 1).all()


def test_range_invariant_fuzz(decoder, latent):
    g = torch.Generator().manual_seed(2)
    pts = (torch.rand(100_000, 3, generator=g) - 0.5) * 4.0
    occ, rgb = decode(decoder, latent, pts)
    assert occ.min() >= 0 and occ.max() <= 1
    assert rgb.min() >= 0 and rgb.max() <= 1


def test_permutation_equivariance(decoder, latent):
    # Per-point independence: outputs permute with the inputs. Equality is
    # up to GEMM blocking noise (batch position changes last-ulp rounding).
    pts = torch.rand(200, 3) - 0.5
    perm = torch.randperm(200)
    occ, rgb = decode(decoder, latent, pts)
    occ_p, rgb_p = decode(decoder, latent, pts[perm])
    assert torch.allclose(occ[perm], occ_p, atol=1e-6)
    assert torch.allclose(rgb[perm], rgb_p, atol=1e-6)


def test_batched_decode_matches_single(decoder):
    g = torch.Generator().manual_seed(3)
    latents = torch.randn(3, 16, generator=g)
    pts = torch.rand(3, 50, 3, generator=g) - 0.5
    occ_b, rgb_b = decode(decoder, latents, pts)
    for b in range(3):
        occ_s, rgb_s = decode(decoder, latents[b], pts[b])
        assert torch.allclose(occ_b[b], occ_s, atol=1e-7)
        assert torch.allclose(rgb_b[b], rgb_s, atol=1e-7)


def test_decode_contract_errors(decoder, latent):
    with pytest.raises(ContractError):
        decode(decoder, torch.randn(5), torch.rand(4, 3))
    with pytest.raises(ContractError):
        decode(decoder, latent, torch.tensor([[0.0, float("nan"), 0.0]]))
    with pytest.raises(ContractError):
        decode(decoder, latent, torch.rand(4, 2))


def _finite_difference_check(f, param_tensor, flat_idx, h=1e-4, rel_tol=1e-3):
    with torch.no_grad():
        param_tensor.reshape(-1)[flat_idx] += h
        up = float(f())
        param_tensor.reshape(-1)[flat_idx] -= 2 * h
        down = float(f())
        param_tensor.reshape(-1)[flat_idx] += h
    return (up - down) / (2 * h)


def test_gradients_match_finite_differences():
    torch.manual_seed(4)
    dec = ImplicitDecoder(CFG).double()
    g = torch.Generator().manual_seed(5)
    rng = np.random.default_rng(6)
    names = [n for n, _ in dec.named_parameters()]
    for probe in range(20):
        latent = torch.randn(16, generator=g, dtype=torch.float64,
                             requires_grad=True)
        pts = (torch.rand(1, 3, generator=g, dtype=torch.float64) - 0.5)
        pts.requires_grad_(True)
        channel = probe % 4  # 0 = occupancy, 1..3 = color

        def value():
            occ, rgb = decode(dec, latent, pts)
            return occ[0] if channel == 0 else rgb[0, channel - 1]

        out = value()
        grads = torch.autograd.grad(
            out, [latent, pts] + list(dec.parameters()), allow_unused=True
        )

        # latent coordinate
        idx = int(rng.integers(0, 16))
        lat_detached = latent.detach()
        fd = _finite_difference_check(
            lambda: (decode(dec, lat_detached, pts.detach())[0][0]
                     if channel == 0
                     else decode(dec, lat_detached, pts.detach())[1][0, channel - 1]),
            lat_detached, idx,
        )
        got = float(grads[0][idx])
        assert abs(got - fd) / max(abs(fd), abs(got), 1e-8) < 1e-3

        # point coordinate
        axis = int(rng.integers(0, 3))
        pts_detached = pts.detach()
        fd = _finite_difference_check(
            lambda: (decode(dec, lat_detached, pts_detached)[0][0]
                     if channel == 0
                     else decode(dec, lat_detached, pts_detached)[1][0, channel - 1]),
            pts_detached, axis,
        )
        got = float(grads[1].reshape(-1)[axis])
        assert abs(got - fd) / max(abs(fd), abs(got), 1e-8) < 1e-3

        # one trunk weight
        name = names[int(rng.integers(0, len(names)))]
        param = dict(dec.named_parameters())[name]
        widx = int(rng.integers(0, param.numel()))
        fd = _finite_difference_check(
            lambda: (decode(dec, lat_detached, pts_detached)[0][0]
                     if channel == 0
                     else decode(dec, lat_detached, pts_detached)[1][0, channel - 1]),
            param, widx,
        )
        gi = [n for n, _ in dec.named_parameters()].index(name)
        g_tensor = grads[2 + gi]
        got = 0.0 if g_tensor is None else float(g_tensor.reshape(-1)[widx])
        denom = max(abs(fd), abs(got), 1e-9)
        assert abs(got - fd) / denom < 1e-3, (name, widx, got, fd)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def test_split_preserves_decode_bitwise(decoder, latent):
    pts = torch.rand(1000, 3) - 0.5
    occ, rgb = decode(decoder, latent, pts)
    split = split_decoder(decoder)
    occ_s, rgb_s = decode(split, latent, pts)
    assert torch.equal(occ, occ_s)
    assert torch.equal(rgb, rgb_s)


def test_split_pathway_independence(decoder, latent):
    pts = torch.rand(100, 3) - 0.5
    split = split_decoder(decoder)
    occ0, rgb0 = decode(split, latent, pts)
    with torch.no_grad():
        split.color_trunk.layers[0].weight.add_(0.5)
    occ1, rgb1 = decode(split, latent, pts)
    assert torch.equal(occ0, occ1)
    assert not torch.equal(rgb0, rgb1)

    split2 = split_decoder(decoder)
    with torch.no_grad():
        split2.occ_trunk.layers[0].weight.add_(0.5)
    occ2, rgb2 = decode(split2, latent, pts)
    assert torch.equal(rgb0, rgb2)
    assert not torch.equal(occ0, occ2)


def test_split_twice_is_contract_error(decoder):
    split = split_decoder(decoder)
    with pytest.raises(ContractError):
        split_decoder(split)


# ---------------------------------------------------------------------------
# Snapshots
# ---------------------------------------------------------------------------

def test_snapshot_matches_decode_at_lattice(decoder, latent):
    grid = snapshot_occupancy(decoder, latent, 16)
    pts = OccupancyGrid.lattice(16)
    occ, _ = decode(decoder, latent, pts)
    assert torch.equal(grid.values.reshape(-1), occ.detach())


def test_snapshot_determinism(decoder, latent):
    a = snapshot_occupancy(decoder, latent, 12)
    b = snapshot_occupancy(decoder, latent, 12)
    assert torch.equal(a.values, b.values)


def test_snapshot_resolution_contract(decoder, latent):
    with pytest.raises(ContractError):
        snapshot_occupancy(decoder, latent, 4)


def test_snapshot_immutable_after_updates(decoder, latent):
    grid = snapshot_occupancy(decoder, latent, 12)
    before = grid.values.clone()
    opt = torch.optim.Adam(decoder.parameters(), lr=1e-2)
    pts = OccupancyGrid.lattice(12)
    for _ in range(10):
        occ, _ = decode(decoder, latent, pts)
        loss = ((occ - 0.9) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert torch.equal(grid.values, before)
    occ_now, _ = decode(decoder, latent, pts)
    drift = (grid.values.reshape(-1) - occ_now.detach()).abs().mean()
    assert float(drift) > 0


def test_trilinear_interpolation_matches_loop():
    g = torch.Generator().manual_seed(7)
    vals = torch.rand(6, 6, 6, generator=g)
    grid = OccupancyGrid(resolution=6, values=vals)
    pts = torch.rand(50, 3, generator=g) - 0.5

    def loop_trilinear(p):
        r = 6
        u = [(p[d] + 0.5) * r - 0.5 for d in range(3)]
        i0 = [int(np.floor(u[d])) for d in range(3)]
        frac = [u[d] - i0[d] for d in range(3)]
        i0c = [min(max(i0[d], 0), r - 1) for d in range(3)]
        i1c = [min(i0c[d] + 1, r - 1) for d in range(3)]
        total = 0.0
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = (
                        (frac[0] if dx else 1 - frac[0])
                        * (frac[1] if dy else 1 - frac[1])
                        * (frac[2] if dz else 1 - frac[2])
                    )
                    ix = i1c[0] if dx else i0c[0]
                    iy = i1c[1] if dy else i0c[1]
                    iz = i1c[2] if dz else i0c[2]
                    total += w * float(vals[ix, iy, iz])
        return total

    got = grid.trilinear(pts)
    expect = torch.tensor([loop_trilinear(p.tolist()) for p in pts])
    assert torch.allclose(got, expect, atol=1e-5)


def test_decoder_checkpoint_roundtrip(tmp_path, decoder, latent):
    path = str(tmp_path / "dec.ckpt")
    save_decoder(path, decoder, {"config_hash": "abc"})
    loaded, meta = load_decoder(path)
    assert meta["config_hash"] == "abc"
    pts = torch.rand(64, 3) - 0.5
    occ_a, rgb_a = decode(decoder, latent, pts)
    occ_b, rgb_b = decode(loaded, latent, pts)
    assert torch.equal(occ_a, occ_b)
    assert torch.equal(rgb_a, rgb_b)
