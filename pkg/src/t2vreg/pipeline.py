"""From waveforms to training arrays and back.

An :class:`Enhancer` bundles a model with the normalization and GV
statistics it was trained with.  It turns noisy utterances into model
inputs, maps model outputs back to clean-LPS estimates, and resynthesizes
waveforms with the noisy phase.
"""

import json
import os

import numpy as np

from . import dsp
from .dsp import FeatureConfig, GvStats, NormStats, Utterance
from .errors import ConfigError
from .train import mse_loss


# --- dataset directories --------------------------------------------------------

def write_dataset(utterances, out_dir, spec, seed, fmt="float"):
    """Write WAV pairs plus ``manifest.json``; returns the manifest rows."""
    os.makedirs(os.path.join(out_dir, "clean"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "noisy"), exist_ok=True)
    cfg = FeatureConfig(sample_rate=spec.sample_rate)
    rows = []
    for utt in utterances:
        clean_rel = os.path.join("clean", f"{utt.uid}.wav")
        noisy_rel = os.path.join("noisy", f"{utt.uid}.wav")
        dsp.write_wav(os.path.join(out_dir, clean_rel), utt.clean, spec.sample_rate, fmt)
        noisy = utt.noisy[:, 0] if utt.noisy.shape[1] == 1 else utt.noisy
        dsp.write_wav(os.path.join(out_dir, noisy_rel), noisy, spec.sample_rate, fmt)
        rows.append({"utteranceId": utt.uid, "frames": dsp.num_frames(len(utt.clean), cfg),
                     "snrDb": utt.snr_db, "noiseKind": utt.noise_kind,
                     "channels": int(utt.noisy.shape[1]), "split": utt.split,
                     "cleanIndex": utt.clean_index, "clean": clean_rel, "noisy": noisy_rel})
    manifest = {"seed": seed, "sampleRate": spec.sample_rate, "spec": spec.to_json(),
                "utterances": rows}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    return rows


def read_dataset(data_dir):
    """Load every utterance listed in ``manifest.json``."""
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(path):
        raise ConfigError(f"no manifest.json in {data_dir}")
    with open(path) as f:
        manifest = json.load(f)
    out = []
    for row in manifest["utterances"]:
        _, clean = dsp.read_wav(os.path.join(data_dir, row["clean"]))
        _, noisy = dsp.read_wav(os.path.join(data_dir, row["noisy"]))
        if noisy.ndim == 1:
            noisy = noisy[:, None]
        out.append(Utterance(uid=row["utteranceId"], clean=clean, noisy=noisy,
                             snr_db=float(row["snrDb"]), noise_kind=row["noiseKind"],
                             split=row.get("split", "train"),
                             clean_index=int(row.get("cleanIndex", 0))))
    return out


def by_split(utterances, split):
    return [u for u in utterances if u.split == split]


# --- features -----------------------------------------------------------------------

class UtteranceFeatures:
    """STFT-domain views of one utterance."""

    def __init__(self, utt, cfg):
        specs = [dsp.stft(utt.noisy[:, b], cfg) for b in range(utt.noisy.shape[1])]
        self.noisy_lps = np.stack([dsp.lps(s, cfg.lps_floor) for s in specs], axis=2)  # [T, F, B]
        self.noisy_phase = np.angle(specs[0])
        self.clean_lps = dsp.lps(dsp.stft(utt.clean, cfg), cfg.lps_floor)
        self.length = len(utt.clean)


class Enhancer:
    """Model + feature pipeline + normalization statistics."""

    def __init__(self, model, feature_cfg=None, in_stats=None, out_stats=None, gv=None):
        self.model = model
        mc = model.config
        self.cfg = feature_cfg or FeatureConfig(context_m=(mc.context_frames - 1) // 2,
                                                channels=mc.channels, nat=mc.nat)
        if self.cfg.freq_bins != mc.freq_bins:
            raise ConfigError(f"feature config gives {self.cfg.freq_bins} bins, "
                              f"model expects {mc.freq_bins}")
        self.in_stats = in_stats
        self.out_stats = out_stats
        self.gv = gv

    def features(self, utts):
        return [UtteranceFeatures(u, self.cfg) for u in utts]

    def fit_stats(self, feats):
        noisy = np.concatenate([f.noisy_lps.reshape(len(f.noisy_lps), -1) for f in feats])
        clean = np.concatenate([f.clean_lps for f in feats])
        self.in_stats = NormStats.fit(noisy)
        self.out_stats = NormStats.fit(clean)

    def _inputs_one(self, f):
        mc = self.model.config
        T, F, B = f.noisy_lps.shape
        z = self.in_stats.normalize(f.noisy_lps.reshape(T, F * B)).reshape(T, F, B)
        if mc.drop_dc:
            z = z[:, 1:, :]
        m = (mc.context_frames - 1) // 2
        if mc.is_cnn:
            return dsp.context_windows(z, m)                          # [T, 2m+1, F', B]
        frame = z.transpose(0, 2, 1).reshape(T, -1)                  # channels concatenated
        x = dsp.context_expand(frame, m)
        if mc.nat:
            x = dsp.nat_augment(x, dsp.noise_estimate(z[:, :, 0], self.cfg.noise_frames),
                                bins=z.shape[1])
        return x

    def _dc_column(self, f):
        """Noisy DC bin (channel 0) expressed in normalized target units."""
        return (f.noisy_lps[:, 0, 0] - self.out_stats.mean[0]) / self.out_stats.std[0]

    def arrays(self, feats):
        """Model inputs and (possibly DC-dropped) normalized targets."""
        xs, ys = [], []
        for f in feats:
            xs.append(self._inputs_one(f))
            y = self.out_stats.normalize(f.clean_lps)
            ys.append(y[:, 1:] if self.model.config.drop_dc else y)
        return np.concatenate(xs), np.concatenate(ys)

    def predict_normalized(self, f, identity=False):
        """Full-band normalized clean-LPS estimate ``[T, F]`` for one utterance."""
        if identity:
            return self.out_stats.normalize(f.noisy_lps[:, :, 0])
        out = self.model.predict(self._inputs_one(f))
        if self.model.config.drop_dc:
            out = dsp.reattach_dc_bin(out, self._dc_column(f))
        return out

    def enhance_lps(self, f, use_gv=False, identity=False):
        est = self.out_stats.denormalize(self.predict_normalized(f, identity))
        if use_gv and self.gv is not None:
            est = dsp.gv_equalize(est, self.gv)
        return est

    def fit_gv(self, feats):
        est = np.concatenate([self.out_stats.denormalize(self.predict_normalized(f))
                              for f in feats])
        ref = np.concatenate([f.clean_lps for f in feats])
        self.gv = GvStats.fit(est, ref)
        return self.gv

    def resynthesize(self, f, est_lps):
        mag = np.sqrt(np.exp(est_lps))
        return dsp.istft(mag, f.noisy_phase, self.cfg, length=f.length)

    def evaluate(self, utts, use_gv=False, identity=False, resynth_dir=None, feats=None):
        """Average MSE (normalized LPS), LSD and segmental SNR over utterances."""
        feats = feats if feats is not None else self.features(utts)
        sums = {"mse": 0.0, "lsd": 0.0, "lsdIn": 0.0, "lsdVsNoisy": 0.0,
                "segSnrIn": 0.0, "segSnrOut": 0.0}
        frames = 0
        for utt, f in zip(utts, feats):
            norm_est = self.predict_normalized(f, identity)
            target = self.out_stats.normalize(f.clean_lps)
            T = len(target)
            sums["mse"] += mse_loss(norm_est, target)[0] * T
            frames += T
            est = self.enhance_lps(f, use_gv, identity)
            sums["lsd"] += dsp.log_spectral_distance(f.clean_lps, est)
            sums["lsdIn"] += dsp.log_spectral_distance(f.clean_lps, f.noisy_lps[:, :, 0])
            sums["lsdVsNoisy"] += dsp.log_spectral_distance(f.noisy_lps[:, :, 0], est)
            wave = self.resynthesize(f, est)
            sums["segSnrIn"] += dsp.seg_snr(utt.clean, utt.noisy[:, 0], self.cfg)
            sums["segSnrOut"] += dsp.seg_snr(utt.clean, wave, self.cfg)
            if resynth_dir is not None:
                os.makedirs(resynth_dir, exist_ok=True)
                dsp.write_wav(os.path.join(resynth_dir, f"{utt.uid}.wav"), wave,
                              self.cfg.sample_rate)
        n = max(len(utts), 1)
        out = {k: v / n for k, v in sums.items()}
        out["mse"] = sums["mse"] / max(frames, 1)
        return out

    # --- checkpoint helpers ---

    def state_tensors(self):
        tensors = dict(self.model.params)
        tensors.update({f"buffer.{k}": v for k, v in self.model.buffers.items()})
        if self.in_stats is not None:
            tensors.update({"norm.in.mean": self.in_stats.mean, "norm.in.std": self.in_stats.std,
                            "norm.out.mean": self.out_stats.mean,
                            "norm.out.std": self.out_stats.std})
        if self.gv is not None:
            tensors.update({"gv.ref_var": self.gv.ref_var, "gv.est_var": self.gv.est_var,
                            "gv.est_mean": self.gv.est_mean})
        return tensors
