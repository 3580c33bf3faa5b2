"""
训练循环
每次迭代：随机选取 b 张图像 -> 采样图像块对 -> 前向 -> 正负样本采样 -> L = L_g + L_l -> 优化器更新
所有随机性来自按 (种子, 迭代, 图像块对) 命名的独立随机数流，恢复训练后结果位级一致
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from core import diffcore as dc
from core.augment import sample_pair
from core.contrast import LossValue, PairFields, batch_loss
from core.net import Params, forward, init_params, load_checkpoint, save_checkpoint
from core.phantom import Phantom
from core.rng import derive_seed, make_rng
from utils.config_manager import RunConfig
from utils.error_handling import CheckpointError, NonFiniteLossError
from utils.log_manager import LossLog
from utils.task_manager import Stopwatch, TaskManager
from utils.tensor_io import write_json


logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


# ========================================
# 优化器
# ========================================
class AdamOptimizer:
    """
    Adam 优化器，可选 RAdam 方差修正

    没有梯度的参数不更新其矩估计（消融时未使用的嵌入头保持不变）。
    """

    def __init__(
        self,
        params: Params,
        lr: float,
        beta1: float = BETA1,
        beta2: float = BETA2,
        eps: float = EPSILON,
        rectify: bool = False,
        state: dict | None = None,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.rectify = rectify
        if state is None:
            state = {
                "step": 0,
                "m": {name: np.zeros_like(p.values) for name, p in params.items()},
                "v": {name: np.zeros_like(p.values) for name, p in params.items()},
            }
        self.state = state

    def _rectification(self, step: int) -> float | None:
        """RAdam 修正系数；方差估计尚不可靠时返回 None（退化为动量 SGD）"""
        rho_inf = 2.0 / (1.0 - self.beta2) - 1.0
        beta2_t = self.beta2**step
        rho_t = rho_inf - 2.0 * step * beta2_t / (1.0 - beta2_t)
        if rho_t <= 4.0:
            return None
        return float(np.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t)))

    def step(self, grads: dict[str, np.ndarray | None]) -> None:
        """执行一步更新"""
        self.state["step"] += 1
        t = self.state["step"]
        bias1 = 1.0 - self.beta1**t
        bias2 = 1.0 - self.beta2**t
        rect = self._rectification(t) if self.rectify else 1.0

        for name, param in self.params.items():
            grad = grads.get(name)
            if grad is None:
                continue
            grad = grad.astype(np.float64)
            m = self.beta1 * self.state["m"][name] + (1.0 - self.beta1) * grad
            v = self.beta2 * self.state["v"][name] + (1.0 - self.beta2) * grad * grad
            self.state["m"][name] = m.astype(param.values.dtype)
            self.state["v"][name] = v.astype(param.values.dtype)

            m_hat = m / bias1
            if rect is None:
                update = self.lr * m_hat
            else:
                update = self.lr * rect * m_hat / (np.sqrt(v / bias2) + self.eps)
            param.values = (param.values - update).astype(param.values.dtype)


def step_optimizer(params: Params, grads: dict, state: dict | None, lr: float, rectify: bool = False) -> tuple[Params, dict]:
    """函数式接口：更新参数并返回 (params, state)"""
    optimizer = AdamOptimizer(params, lr, rectify=rectify, state=state)
    optimizer.step(grads)
    return params, optimizer.state


# ========================================
# 训练
# ========================================
@dataclass
class TrainResult:
    checkpoint_dir: Path
    iteration: int
    history: list[tuple[int, float, float]] = field(default_factory=list)


class Trainer:
    """训练器"""

    def __init__(
        self,
        run_config: RunConfig,
        phantoms: list[Phantom],
        out_dir: str | Path,
        task_manager: TaskManager | None = None,
        resume: str | Path | None = None,
    ):
        if not phantoms:
            raise ValueError("training needs at least one phantom")
        self.config = run_config
        self.train_cfg = run_config.train
        self.phantoms = phantoms
        self.out_dir = Path(out_dir)
        self.task_manager = task_manager
        self.heads = ("local",) if self.train_cfg.no_coarse_to_fine else ("global", "local")
        self.history: list[tuple[int, float, float]] = []

        self.start_iteration = 0
        optimizer_state = None
        if resume is not None:
            checkpoint = load_checkpoint(resume)
            if checkpoint.variant != self.train_cfg.variant:
                raise CheckpointError(f"checkpoint variant {checkpoint.variant} != configured {self.train_cfg.variant}")
            self.params = checkpoint.params
            optimizer_state = checkpoint.optimizer_state
            self.start_iteration = checkpoint.iteration
            logger.info(f"从检查点恢复: {resume} (iteration {checkpoint.iteration})")
        else:
            self.params = init_params(run_config.encoder, self.train_cfg.seed)

        self.optimizer = AdamOptimizer(self.params, self.train_cfg.lr, rectify=self.train_cfg.radam, state=optimizer_state)

    # ---------- 批次 ----------
    def select_images(self, iteration: int) -> list[int]:
        rng = make_rng(self.train_cfg.seed, "iteration", iteration, "batch")
        count = len(self.phantoms)
        replace = count < self.train_cfg.batch_size
        return [int(i) for i in rng.choice(count, size=self.train_cfg.batch_size, replace=replace)]

    def _forward_pair(self, pair) -> PairFields:
        g_a, l_a = forward(pair.patch_a, self.params, self.config.encoder, self.heads)
        g_b, l_b = forward(pair.patch_b, self.params, self.config.encoder, self.heads)
        return PairFields(g_a, l_a, g_b, l_b)

    def compute_loss(self, iteration: int) -> tuple[LossValue, list[int]]:
        """构造一次迭代的批次并计算损失（建立计算图）"""
        indices = self.select_images(iteration)
        pairs = [
            sample_pair(self.phantoms[idx], self.config.augment, make_rng(self.train_cfg.seed, "iteration", iteration, "pair", k))
            for k, idx in enumerate(indices)
        ]

        if self.task_manager is not None:
            fields = self.task_manager.map_ordered(self._forward_pair, pairs, context="forward")
        else:
            fields = [self._forward_pair(pair) for pair in pairs]

        rngs = [make_rng(self.train_cfg.seed, "iteration", iteration, "contrast", k) for k in range(len(pairs))]
        return batch_loss(pairs, fields, self.train_cfg, rngs), indices

    def _dump_nonfinite(self, iteration: int, indices: list[int], loss: LossValue) -> int:
        batch_seed = derive_seed(self.train_cfg.seed, "iteration", iteration)
        write_json(
            self.out_dir / f"nonfinite_iter_{iteration:06d}.json",
            {
                "iteration": iteration,
                "batch_seed": batch_seed,
                "seed": self.train_cfg.seed,
                "images": [self.phantoms[i].phantom_id or str(self.phantoms[i].seed) for i in indices],
                "L_g": repr(loss.global_term.item()),
                "L_l": repr(loss.local_term.item()),
                "stats": loss.stats,
            },
        )
        return batch_seed

    def step(self, iteration: int) -> LossValue:
        """执行一次迭代（前向、反向、更新）"""
        loss, indices = self.compute_loss(iteration)
        if not np.isfinite(loss.total.item()):
            batch_seed = self._dump_nonfinite(iteration, indices, loss)
            raise NonFiniteLossError(f"non-finite loss at iteration {iteration}", batch_seed=batch_seed, iteration=iteration)

        for param in self.params.values():
            param.zero_grad()
        dc.backward(loss.total)
        self.optimizer.step({name: p.grad for name, p in self.params.items()})
        return loss

    def save(self, directory: Path, iteration: int) -> Path:
        return save_checkpoint(directory, self.params, self.config, iteration, self.optimizer.state)

    def train(self, iterations: int | None = None) -> TrainResult:
        """
        运行训练直到配置的迭代数（或给定的迭代数）

        Returns:
            TrainResult：最终检查点目录、迭代数与损失历史
        """
        total = iterations if iterations is not None else self.train_cfg.iterations
        self.out_dir.mkdir(parents=True, exist_ok=True)
        final_dir = self.out_dir / "checkpoint"

        logger.info(
            f"🚀 开始训练: variant={self.train_cfg.variant}, 图像 {len(self.phantoms)}, "
            f"迭代 {self.start_iteration + 1}..{total}, batch {self.train_cfg.batch_size}"
        )

        with LossLog(self.out_dir / "loss_log.csv", append=self.start_iteration > 0) as loss_log:
            for iteration in range(self.start_iteration + 1, total + 1):
                watch = Stopwatch()
                loss = self.step(iteration)
                loss_g, loss_l = loss.global_term.item(), loss.local_term.item()
                self.history.append((iteration, loss_g, loss_l))

                if iteration % self.train_cfg.log_every == 0:
                    loss_log.write(iteration, loss_g, loss_l, watch.elapsed_ms())
                    logger.info(f"iter {iteration}/{total}: L_g={loss_g:.4f} L_l={loss_l:.4f} ({watch.elapsed_ms():.0f} ms)")
                if iteration % self.train_cfg.checkpoint_every == 0 and iteration < total:
                    self.save(self.out_dir / "checkpoints" / f"iter_{iteration:06d}", iteration)

        self.save(final_dir, total)
        logger.info(f"✅ 训练完成: {final_dir}")
        return TrainResult(final_dir, total, self.history)


def train(
    run_config: RunConfig,
    phantoms: list[Phantom],
    out_dir: str | Path,
    resume: str | Path | None = None,
    task_manager: TaskManager | None = None,
) -> TrainResult:
    """训练入口（供命令与评估工具调用）"""
    return Trainer(run_config, phantoms, out_dir, task_manager=task_manager, resume=resume).train()
