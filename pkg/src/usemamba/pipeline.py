"""Waveform-in, waveform-out enhancement for the three inference modes.

Every mode ends in the same place: a float64 complex spectrogram that goes
through one inverse SFI-STFT. That shared tail is what makes ``combined``
with an empty region reproduce ``regression`` bit for bit.
"""

from __future__ import annotations

import logging
from typing import Optional

from .combiner import CombinerConfig, RegionMask, combine, region_mask
from .flowmatch import FlowConfig, flow_enhance
from .model import USEMamba, regression_forward
from .signals import ComplexSpectrogram, Waveform, decompress, sfi_istft, sfi_stft

log = logging.getLogger(__name__)

MODES = ("regression", "flow", "combined")


class Enhancer:
    def __init__(
        self,
        mode: str,
        regression: Optional[USEMamba] = None,
        flow: Optional[USEMamba] = None,
        flow_cfg: FlowConfig = FlowConfig(),
        combiner_cfg: CombinerConfig = CombinerConfig(),
    ):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if mode in ("regression", "combined") and regression is None:
            raise ValueError(f"mode={mode} needs a regression checkpoint")
        if mode in ("flow", "combined") and flow is None:
            raise ValueError(f"mode={mode} needs a flow checkpoint")
        if regression is not None and regression.is_flow:
            raise ValueError("the regression checkpoint holds a flow model")
        if flow is not None and not flow.is_flow:
            raise ValueError("the flow checkpoint holds a regression model")
        if mode == "combined" and regression.cfg.stft != flow.cfg.stft:
            raise ValueError("regression and flow checkpoints use different STFT settings")
        self.mode = mode
        self.regression = regression
        self.flow = flow
        self.flow_cfg = flow_cfg
        self.combiner_cfg = combiner_cfg
        self.stft = (regression or flow).cfg.stft
        self.last_region: Optional[RegionMask] = None

    def _spectrum(self, model: USEMamba, noisy: Waveform, template: ComplexSpectrogram):
        if model.is_flow:
            out = flow_enhance(model, noisy, self.flow_cfg)
        else:
            out = regression_forward(model, noisy)
        return template.like(decompress(out.mag_phase, self.stft.compression_exponent))

    def __call__(self, noisy: Waveform) -> Waveform:
        self.stft.geometry(noisy.rate_hz)  # unsupported rates fail here, before any model runs
        noisy_spec = sfi_stft(noisy, self.stft)
        if self.mode == "regression":
            spec = self._spectrum(self.regression, noisy, noisy_spec)
        elif self.mode == "flow":
            spec = self._spectrum(self.flow, noisy, noisy_spec)
        else:
            reg = self._spectrum(self.regression, noisy, noisy_spec)
            gen = self._spectrum(self.flow, noisy, noisy_spec)
            self.last_region = region_mask(noisy_spec, self.combiner_cfg)
            log.debug(
                "region: cutoff bin %s, %d lost frames",
                self.last_region.cutoff_bin, len(self.last_region.lost_frames),
            )
            spec = combine(reg, gen, self.last_region)
        return sfi_istft(spec, len(noisy))
