import numpy as np
import pytest
import torch

from sparsecycle.checkpoint import CheckpointError, decode_tensors, encode_tensors, read_tensors
from sparsecycle.config import TrainConfig
from sparsecycle.data import generate_synthetic_dataset, make_psf, stack_pairs
from sparsecycle.losses import critic_loss
from sparsecycle.networks import NetworkSpec, build_critic
from sparsecycle.sparse import SparseConv2d
from sparsecycle.training import (
    Adam,
    NonFiniteLossError,
    Trainer,
    adam_step,
    load_generator,
    lr_at,
    write_trace,
)


@pytest.fixture(scope="module")
def pairs():
    return generate_synthetic_dataset(4, 32, make_psf(7, 0), seed=0)


def tiny_trainer(**overrides):
    net_kw = {k[4:]: v for k, v in overrides.items() if k.startswith("net_")}
    cfg_kw = {k: v for k, v in overrides.items() if not k.startswith("net_")}
    net = NetworkSpec(base_channels=net_kw.pop("base_channels", 4), n_res_blocks=1, **net_kw)
    cfg = TrainConfig(**{"epochs": 4, "decay_start_epoch": 2, **cfg_kw})
    return Trainer(net, cfg, (3, 32, 32))


def _batch(pairs):
    x, y = stack_pairs(pairs[:1])
    return torch.from_numpy(x), torch.from_numpy(y)


def test_adam_first_step_closed_form():
    theta, m, v = torch.zeros(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64)
    adam_step(theta, torch.ones(1, dtype=torch.float64), m, v, 1, 0.1)
    assert theta.item() == pytest.approx(-0.1, abs=1e-8)
    still = torch.full((3,), 0.7)
    adam_step(still, torch.zeros(3), torch.zeros(3), torch.zeros(3), 1, 0.1)
    assert torch.equal(still, torch.full((3,), 0.7))


def test_adam_converges_on_quadratic():
    theta, m, v = (torch.tensor([1.0], dtype=torch.float64) for _ in range(3))
    m.zero_()
    v.zero_()
    for t in range(1, 1001):
        adam_step(theta, 2 * theta, m, v, t, 1e-2)
    assert abs(theta.item()) < 1e-3


def test_adam_matches_torch_optim(rng):
    start = rng.standard_normal((4, 5))
    ours = torch.tensor(start, dtype=torch.float64)
    ref = torch.tensor(start, dtype=torch.float64, requires_grad=True)
    opt = Adam({"w": ours}, beta1=0.5, beta2=0.999)
    torch_opt = torch.optim.Adam([ref], lr=1e-2, betas=(0.5, 0.999), eps=1e-8)
    target = torch.tensor(rng.standard_normal((4, 5)))
    for _ in range(25):
        opt.step([2 * (ours - target)], 1e-2)
        torch_opt.zero_grad()
        ((ref - target) ** 2).sum().backward()
        torch_opt.step()
    assert torch.allclose(ours, ref.detach(), atol=1e-12)


def test_adam_mask_freezes_entries():
    w = torch.ones(4)
    mask = torch.tensor([1.0, 0.0, 1.0, 0.0])
    Adam({"w": w}, masks={"w": mask}).step([torch.ones(4)], 0.1)
    assert w[1] == 1.0 and w[3] == 1.0 and w[0] < 1.0


def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 2e-4
    assert lr_at(99, cfg) == 2e-4
    assert lr_at(150, cfg) == pytest.approx(1e-4)
    assert lr_at(200, cfg) == 0.0


def test_lr_schedule_shape_and_trapezoid():
    cfg = TrainConfig(epochs=37, decay_start_epoch=11, lr0=3e-4)
    lrs = [lr_at(e, cfg) for e in range(cfg.epochs + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    d, n = cfg.decay_start_epoch, cfg.epochs
    closed = cfg.lr0 * d + cfg.lr0 * (n - d + 1) / 2
    assert abs(sum(lrs) - closed) < 1e-9
    # piecewise linear: constant second differences vanish inside the decay
    second = np.diff(lrs[d:], 2)
    assert np.max(np.abs(second)) < 1e-15


def test_config_rejects_decay_after_end():
    with pytest.raises(ValueError, match="decay_start_epoch"):
        TrainConfig(epochs=10, decay_start_epoch=11)


def test_adversarial_only_generator_loss(pairs):
    """With lambda_cyc = lambda_perc = 0 the generator loss is -D_Y(G_X(x)) - D_X(G_Y(y))."""
    tr = tiny_trainer(lambda_cyc=0.0, lambda_perc=0.0, perceptual=False, net_kwinner=False)
    x, y = _batch(pairs)
    rec = tr.train_step(x, y, lr=0.0)
    assert rec["loss_g"] == rec["adv"]
    with torch.no_grad():
        want = -tr.d_y(tr.g_x(x)).mean() - tr.d_x(tr.g_y(y)).mean()
    assert rec["adv"] == want.item()


def test_identical_seeds_identical_traces(pairs):
    ten = pairs * 3
    a, b = tiny_trainer(), tiny_trainer()
    ra, rb = a.run_epoch(ten[:10]), b.run_epoch(ten[:10])
    assert len(ra) == 10 and ra == rb
    c = tiny_trainer(seed=1)
    assert c.run_epoch(ten[:10]) != ra


def test_one_desk_step_moves_every_parameter(pairs):
    tr = tiny_trainer(net_base_channels=8)
    before = {f"{p}.{n}": t.detach().clone() for p, m in tr.modules().items() for n, t in m.named_parameters()}
    rec = tr.train_step(*_batch(pairs), lr=2e-4)
    assert all(np.isfinite(v) for v in rec.values())
    for p, m in tr.modules().items():
        for n, t in m.named_parameters():
            assert (t.detach() - before[f"{p}.{n}"]).abs().max() > 0, f"{p}.{n} unchanged"


def test_masked_weights_stay_zero(pairs):
    tr = tiny_trainer()
    tr.run_epoch(pairs)
    layers = [m for g in (tr.g_x, tr.g_y) for m in g.modules() if isinstance(m, SparseConv2d)]
    assert layers
    for layer in layers:
        assert torch.all(layer.weight[layer.mask == 0] == 0)


def test_critic_improves_with_generators_fixed(pairs):
    x, y = stack_pairs(pairs[:2])
    x, y = torch.from_numpy(x), torch.from_numpy(y)
    eps = torch.tensor([0.3, 0.7])
    finals = []
    for seed in range(3):
        critic = build_critic(NetworkSpec(base_channels=8, seed=seed))
        opt = Adam(dict(critic.named_parameters()))
        values = []
        for _ in range(50):
            loss = critic_loss(critic, y, x, 10.0, eps=eps)
            values.append(loss.item())
            opt.step(torch.autograd.grad(loss, list(opt.params.values())), 2e-4)
        windows = np.array(values).reshape(10, 5).mean(axis=1)
        if seed == 0:
            assert np.all(np.diff(windows) < 0), windows
        finals.append(windows[-1] < windows[0])
    assert all(finals)


def test_state_roundtrip_is_bit_exact(tmp_path, pairs):
    tr = tiny_trainer()
    tr.run_epoch(pairs)
    path = tmp_path / "a.ckpt"
    tr.save_checkpoint(path)
    again = Trainer.from_checkpoint(path)
    a, b = tr.state_tensors(), again.state_tensors()
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].dtype == b[k].dtype and np.array_equal(a[k], b[k]), k
    again.save_checkpoint(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert any(k.endswith("@f64") for k in a)


def test_checkpoint_corruption_diagnostics(tmp_path):
    buf = encode_tensors({"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    assert np.array_equal(decode_tensors(buf)["w"], np.arange(6).reshape(2, 3))
    with pytest.raises(CheckpointError, match="expected 24 bytes, got 20"):
        decode_tensors(buf[:-4])
    with pytest.raises(CheckpointError, match="bad magic"):
        decode_tensors(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointError, match="version 2"):
        decode_tensors(buf[:4] + (2).to_bytes(4, "little") + buf[8:])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_tensors(buf + b"\0")
    path = tmp_path / "t.ckpt"
    path.write_bytes(buf[:10])
    with pytest.raises(CheckpointError, match=str(path)):
        read_tensors(path)


def test_resume_reproduces_uninterrupted_trace(tmp_path, pairs):
    full = tiny_trainer().fit(pairs)
    part = tiny_trainer().fit(pairs, epochs=2)
    part.save_checkpoint(tmp_path / "mid.ckpt")
    resumed = Trainer.from_checkpoint(tmp_path / "mid.ckpt").fit(pairs)
    assert part.history + resumed.history == full.history
    assert resumed.epoch == 4


def test_load_generator_matches_trainer(tmp_path, pairs):
    tr = tiny_trainer()
    tr.run_epoch(pairs)
    tr.save_checkpoint(tmp_path / "g.ckpt")
    gen = load_generator(tmp_path / "g.ckpt", "gx")
    x, _ = _batch(pairs)
    with torch.no_grad():
        assert torch.equal(gen(x), torch.from_numpy(tr.deblur(x.numpy())))


def test_non_finite_loss_aborts_naming_term(pairs):
    tr = tiny_trainer()
    with torch.no_grad():
        next(tr.d_y.parameters()).fill_(float("nan"))
    with pytest.raises(NonFiniteLossError, match="loss_dy"):
        tr.train_step(*_batch(pairs), lr=2e-4)


def test_fit_rejects_empty_and_mismatched(pairs):
    tr = tiny_trainer()
    with pytest.raises(ValueError, match="empty"):
        tr.fit([])
    small = generate_synthetic_dataset(1, 16, make_psf(3, 0))
    with pytest.raises(ValueError, match="built for"):
        tr.fit(small)


def test_write_trace_format(tmp_path):
    rec = {"epoch": 0, "step": 1, "loss_g": 1.5, "loss_dx": -0.25, "loss_dy": 0.1,
           "cyc": 0.3, "perc": 0.0, "adv": 2.0, "gp": 1e-3}
    write_trace(tmp_path / "t.csv", [rec])
    write_trace(tmp_path / "t.csv", [rec], append=True)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,loss_g,loss_dx,loss_dy,cyc,perc,adv,gp"
    assert lines[1] == "0,1,1.5,-0.25,0.1,0.3,0.0,2.0,0.001" == lines[2]
