"""Audio feature windows aligned to video frames.

Audio features arrive on their own clock (``f_a`` feature steps per
second) while frames tick at ``f_v``. For video frame ``i`` and window
slot ``n`` the fractional feature position is

    u_n = i * f_a / f_v + (n - (W - 1) / 2)

and each slot takes the linear interpolation of the two neighboring
feature steps. A window therefore always spans W / f_a seconds of audio
centered on the frame, regardless of the video frame rate. Positions past
either end of the feature grid clamp to the edge value.

Only fixed arithmetic lives here; the learned parts of the audio pathway
(window position embedding, pooling to latent rate, projection) are
denoiser parameters.
"""

from __future__ import annotations

import numpy as np

from .timeline import latent_to_range

DEFAULT_FEATURE_RATE = 50.0
DEFAULT_WINDOW = 9


class AudioError(ValueError):
    pass


def resample_window(
    grid: np.ndarray, frame_index: int, f_a: float, f_v: float, window: int = DEFAULT_WINDOW
) -> np.ndarray:
    """Window of ``window`` interpolated feature steps for one video frame.

    ``grid`` is [L, ...feature dims...]; the result is [window, ...].
    """
    if grid.ndim < 1 or grid.shape[0] < 1:
        raise AudioError(f"feature grid needs at least one step, got shape {grid.shape}")
    if window < 1 or window % 2 == 0:
        raise AudioError(f"window must be odd and positive, got {window}")
    if f_a <= 0 or f_v <= 0:
        raise AudioError(f"rates must be positive, got f_a={f_a}, f_v={f_v}")
    L = grid.shape[0]
    n = np.arange(window, dtype=np.float64)
    u = frame_index * (f_a / f_v) + (n - (window - 1) / 2)
    k = np.floor(u).astype(np.int64)
    alpha = u - k
    k0 = np.clip(k, 0, L - 1)
    k1 = np.clip(k + 1, 0, L - 1)
    shaped = alpha.reshape((window,) + (1,) * (grid.ndim - 1))
    return (1.0 - shaped) * grid[k0] + shaped * grid[k1]


def windows_for_frames(
    grid: np.ndarray, num_frames: int, f_a: float, f_v: float, window: int = DEFAULT_WINDOW
) -> np.ndarray:
    """Stack of per-frame windows, [num_frames, window, ...]."""
    return np.stack(
        [resample_window(grid, i, f_a, f_v, window) for i in range(num_frames)]
    )


def group_windows_by_latent(frame_windows: np.ndarray, num_latents: int) -> list[np.ndarray]:
    """Split per-frame windows into the frame groups of each latent.

    Returns ``num_latents`` arrays of shape [group_size, window, ...],
    where group sizes follow the causal packing (1 frame for latent 0,
    up to 8 after). The available frame count may fall short of the last
    group; the group then holds what exists.
    """
    F = frame_windows.shape[0]
    groups = []
    for n in range(num_latents):
        s, e = latent_to_range(n)
        if s >= F:
            raise AudioError(
                f"latent {n} starts at video frame {s}, but only {F} frames of audio cover it"
            )
        groups.append(frame_windows[s:min(e, F)])
    return groups


def feature_grid_length(duration_s: float, f_a: float) -> int:
    return int(round(duration_s * f_a))
