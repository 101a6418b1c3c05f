#!/usr/bin/env python3
"""
Room simulation utilities for the virtual microphone toolkit.
This module renders shoebox room impulse responses with the image method,
synthesizes spherically diffuse noise and speech-like sources, and mixes
them into supervised {r, v, x} training tuples.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, fftconvolve, sosfilt
from scipy.spatial.transform import Rotation

from utils.errors import ConfigError, GeometryError, LengthError, ScalingError, ShapeError
from utils.signal_utils import MultichannelWave

logger = logging.getLogger(__name__)

# Array channels in storage order; the middle one is the virtual microphone.
CHANNEL_NAMES = (4, 5, 6)
RM_CHANNELS = (0, 2)
VM_CHANNELS = (1,)
REF_CHANNEL = 0

MIC_SPACING = 0.1
WALL_CLEARANCE = 0.3
MIN_SOURCE_DISTANCE = 0.3
WIDTH_RANGE = (2.5, 10.0)
HEIGHT_RANGE = (2.5, 5.0)
T60_RANGE = (0.0, 0.3)
SIR_RANGE = (-3.0, 3.0)
SABINE_CONSTANT = 24.0 * np.log(10.0)


@dataclass(frozen=True)
class RoomSpec:
    """Shoebox room: dimensions in meters, reverberation time in seconds"""

    width: float
    depth: float
    height: float
    t60: float
    speed_of_sound: float = 343.0

    def __post_init__(self):
        for name, value, (low, high) in (('width', self.width, WIDTH_RANGE),
                                         ('depth', self.depth, WIDTH_RANGE),
                                         ('height', self.height, HEIGHT_RANGE),
                                         ('t60', self.t60, T60_RANGE)):
            if not low <= value <= high:
                raise ConfigError(f"room {name} {value} outside [{low}, {high}]")
        if self.speed_of_sound <= 0:
            raise ConfigError(f"speed of sound must be positive, got {self.speed_of_sound}")

    @property
    def dimensions(self):
        return np.array([self.width, self.depth, self.height])

    @property
    def volume(self):
        return float(np.prod(self.dimensions))

    @property
    def surface(self):
        w, d, h = self.dimensions
        return float(2.0 * (w * d + w * h + d * h))

    def minimum_t60(self):
        """Shortest reverberation time Sabine allows (absorption coefficient 1)."""
        return SABINE_CONSTANT * self.volume / (self.speed_of_sound * self.surface)

    def absorption(self):
        """Uniform wall absorption coefficient from Sabine's formula."""
        if self.t60 == 0:
            return 1.0
        coefficient = SABINE_CONSTANT * self.volume / (self.speed_of_sound * self.surface * self.t60)
        if coefficient > 1.0 + 1e-9:
            raise ConfigError(f"t60 {self.t60:.3f} s unachievable for a {self.volume:.1f} m^3 room "
                              f"(minimum {self.minimum_t60():.3f} s)")
        return min(coefficient, 1.0)

    def reflection_coefficient(self):
        return float(np.sqrt(1.0 - self.absorption()))

    def contains(self, position, clearance=0.0):
        position = np.asarray(position, dtype=np.float64)
        return bool(np.all(position > clearance) and np.all(position < self.dimensions - clearance))

    def to_dict(self):
        return {'width': self.width, 'depth': self.depth, 'height': self.height,
                't60': self.t60, 'speed_of_sound': self.speed_of_sound}


@dataclass(frozen=True)
class Scene:
    """A simulated recording setup; index 0 of sources is the target speaker"""

    room: RoomSpec
    source_positions: np.ndarray
    mic_positions: np.ndarray
    sir_db: tuple
    noise_snr_db: float = 20.0
    seed: int = 0
    sample_rate: int = 8000

    def __post_init__(self):
        sources = np.array(self.source_positions, dtype=np.float64).reshape(-1, 3)
        mics = np.array(self.mic_positions, dtype=np.float64).reshape(-1, 3)
        for kind, positions in (('source', sources), ('microphone', mics)):
            for position in positions:
                if not self.room.contains(position):
                    raise GeometryError(f"{kind} at {position.tolist()} is outside the room")
        sir_db = tuple(float(s) for s in self.sir_db)
        if len(sir_db) != len(sources) - 1:
            raise ConfigError(f"need {len(sources) - 1} interferer SIRs, got {len(sir_db)}")
        if any(not SIR_RANGE[0] <= s <= SIR_RANGE[1] for s in sir_db):
            raise ConfigError(f"SIR values {sir_db} outside [{SIR_RANGE[0]}, {SIR_RANGE[1]}] dB")
        object.__setattr__(self, 'source_positions', sources)
        object.__setattr__(self, 'mic_positions', mics)
        object.__setattr__(self, 'sir_db', sir_db)

    @property
    def num_sources(self):
        return self.source_positions.shape[0]

    @property
    def num_mics(self):
        return self.mic_positions.shape[0]

    def to_dict(self):
        return {
            'room': self.room.to_dict(),
            'source_positions': self.source_positions.tolist(),
            'mic_positions': self.mic_positions.tolist(),
            'sir_db': list(self.sir_db),
            'noise_snr_db': self.noise_snr_db,
            'seed': self.seed,
            'sample_rate': self.sample_rate,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(room=RoomSpec(**data['room']),
                   source_positions=data['source_positions'],
                   mic_positions=data['mic_positions'],
                   sir_db=tuple(data['sir_db']),
                   noise_snr_db=data['noise_snr_db'],
                   seed=data['seed'],
                   sample_rate=data['sample_rate'])


@dataclass(frozen=True)
class MixtureSample:
    """
    One supervised example.

    ``r`` holds the real microphones, ``v`` the observation at the virtual
    microphone position, ``x`` the per-source images at the reference channel.
    ``images`` keeps every channel, [C, I, T], so mixture = images.sum(1) + noise.
    """

    r: MultichannelWave
    v: MultichannelWave
    x: MultichannelWave
    mixture: MultichannelWave
    images: np.ndarray
    noise: MultichannelWave
    metadata: Scene = field(repr=False)


def image_method_rir(room, src, mic, fs, max_order=None, interp_taps=81):
    """
    Room impulse response between a source and a microphone.

    Image sources (1 - 2q) * src + 2 m L, q in {0, 1}, reflect
    |m - q| + |m| times per axis and are attenuated by the uniform wall
    reflection coefficient once per reflection and by 1 / (4 pi d).

    Args:
        room: RoomSpec
        src, mic: positions in meters
        fs: sample rate in Hz
        max_order: optional cap on the total number of reflections
        interp_taps: length of the Hann-windowed sinc fractional delay
            filter, 0 renders integer delays

    Returns:
        np.ndarray: RIR covering 1.5 * t60 (at least the direct path)
    """
    src = np.asarray(src, dtype=np.float64)
    mic = np.asarray(mic, dtype=np.float64)
    if fs <= 0:
        raise ConfigError(f"sample rate must be positive, got {fs}")
    for kind, position in (('source', src), ('microphone', mic)):
        if not room.contains(position):
            raise GeometryError(f"{kind} at {position.tolist()} is outside the room")
    distance = float(np.linalg.norm(src - mic))
    if distance < 1e-6:
        raise GeometryError(f"source and microphone coincide at {src.tolist()}")

    beta = room.reflection_coefficient()
    c = room.speed_of_sound
    half = interp_taps // 2
    direct_delay = distance / c * fs
    length = int(np.ceil(max(1.5 * room.t60 * fs, direct_delay))) + half + 2
    max_delay = length - half - 2
    dims = room.dimensions
    orders = np.ceil(max_delay / fs * c / (2.0 * dims)).astype(int) + 1

    axes = []
    for axis in range(3):
        m = np.arange(-orders[axis], orders[axis] + 1)
        offsets, exponents = [], []
        for q in (0, 1):
            offsets.append((1 - 2 * q) * src[axis] + 2 * m * dims[axis] - mic[axis])
            exponents.append(np.abs(m - q) + np.abs(m))
        axes.append((np.concatenate(offsets), np.concatenate(exponents)))
    (dx, ex), (dy, ey), (dz, ez) = axes

    rir = np.zeros(length)
    taps = np.arange(-half, half + 1)
    # one x-image at a time bounds the size of the yz grid
    for x_offset, x_exponent in zip(dx, ex):
        dist = np.sqrt(x_offset ** 2 + dy[:, None] ** 2 + dz[None, :] ** 2).ravel()
        order = (x_exponent + ey[:, None] + ez[None, :]).ravel()
        delay = dist / c * fs
        keep = delay <= max_delay
        if max_order is not None:
            keep &= order <= max_order
        if beta == 0.0:
            keep &= order == 0
        if not np.any(keep):
            continue
        dist, order, delay = dist[keep], order[keep], delay[keep]
        amplitude = np.power(beta, order) / (4.0 * np.pi * dist)
        if interp_taps == 0:
            np.add.at(rir, np.round(delay).astype(int), amplitude)
            continue
        index = np.round(delay).astype(int)[:, None] + taps[None, :]
        t = index - delay[:, None]
        kernel = 0.5 * (1.0 + np.cos(2.0 * np.pi * t / interp_taps)) * np.sinc(t)
        valid = (index >= 0) & (index < length)
        np.add.at(rir, index[valid], (amplitude[:, None] * kernel)[valid])
    return rir


def fibonacci_directions(count):
    """Quasi-uniform unit vectors on the sphere."""
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / count
    radius = np.sqrt(1.0 - z ** 2)
    phi = np.pi * (1.0 + np.sqrt(5.0)) * i
    return np.stack([radius * np.cos(phi), radius * np.sin(phi), z], axis=1)


def diffuse_noise(mic_positions, length, fs, rng, num_directions=64, speed_of_sound=343.0):
    """
    Spherically isotropic noise: independent white plane waves from
    ``num_directions`` far-field directions on a randomly rotated lattice.

    Returns:
        MultichannelWave: [C, length]
    """
    mic_positions = np.asarray(mic_positions, dtype=np.float64).reshape(-1, 3)
    rotation = Rotation.random(random_state=rng)
    directions = rotation.apply(fibonacci_directions(num_directions))
    delays = mic_positions @ directions.T / speed_of_sound
    guard = int(np.ceil(np.max(np.abs(delays)) * fs)) + 1
    nfft = int(2 ** np.ceil(np.log2(length + 2 * guard)))
    waves = rng.standard_normal((num_directions, nfft))
    spectra = np.fft.rfft(waves, axis=-1)
    freqs = np.fft.rfftfreq(nfft, d=1.0 / fs)
    steering = np.exp(2j * np.pi * freqs[None, None, :] * delays[:, :, None])
    noise = np.fft.irfft(np.einsum('cdk,dk->ck', steering, spectra), n=nfft, axis=-1)
    noise = noise[:, guard:guard + length] / np.sqrt(num_directions)
    return MultichannelWave(noise, fs)


def synthesize(scene, sources, noise, max_order=None, interp_taps=81):
    """
    Mix sources and noise into a multichannel recording for ``scene``.

    Interferers are scaled to the scene SIRs relative to the first source and
    the noise to the scene SNR relative to the summed speech, all measured at
    the reference channel.

    Args:
        scene: Scene
        sources: list of mono MultichannelWave, one per source, equal length
        noise: MultichannelWave [C, T]

    Returns:
        MixtureSample
    """
    fs = scene.sample_rate
    if len(sources) != scene.num_sources:
        raise ShapeError(f"scene has {scene.num_sources} sources, got {len(sources)} signals")
    if any(s.sample_rate != fs for s in sources) or noise.sample_rate != fs:
        raise ConfigError(f"all signals must be sampled at {fs} Hz")
    length = sources[0].length
    if any(s.length != length for s in sources) or noise.length != length:
        raise LengthError("sources and noise must have equal length")
    if noise.num_channels != scene.num_mics:
        raise ShapeError(f"noise has {noise.num_channels} channels, scene has {scene.num_mics} microphones")
    for i, source in enumerate(sources):
        if not np.any(source.samples):
            raise ScalingError(f"source {i} is silent")

    images = np.zeros((scene.num_mics, scene.num_sources, length))
    for c, mic in enumerate(scene.mic_positions):
        for i, (source, position) in enumerate(zip(sources, scene.source_positions)):
            rir = image_method_rir(scene.room, position, mic, fs, max_order=max_order, interp_taps=interp_taps)
            images[c, i] = fftconvolve(source.samples[0], rir)[:length]

    energies = np.sum(images[REF_CHANNEL] ** 2, axis=-1)
    if np.any(energies <= 0):
        raise ScalingError(f"zero-energy source image at the reference channel: {energies.tolist()}")
    gains = np.ones(scene.num_sources)
    for i, sir in enumerate(scene.sir_db, start=1):
        gains[i] = np.sqrt(energies[0] / energies[i] * 10.0 ** (-sir / 10.0))
    images = images * gains[None, :, None]

    speech = images.sum(axis=1)
    noise_energy = float(np.sum(noise.samples[REF_CHANNEL] ** 2))
    if noise_energy <= 0:
        raise ScalingError("noise is silent at the reference channel")
    speech_energy = float(np.sum(speech[REF_CHANNEL] ** 2))
    noise_gain = np.sqrt(speech_energy / noise_energy * 10.0 ** (-scene.noise_snr_db / 10.0))
    scaled_noise = noise.samples * noise_gain
    mixture = speech + scaled_noise

    logger.debug(f"Synthesized scene seed={scene.seed}: gains={gains.round(4).tolist()}, noise gain={noise_gain:.4g}")
    return MixtureSample(
        r=MultichannelWave(mixture[list(RM_CHANNELS)], fs),
        v=MultichannelWave(mixture[list(VM_CHANNELS)], fs),
        x=MultichannelWave(images[REF_CHANNEL], fs),
        mixture=MultichannelWave(mixture, fs),
        images=images,
        noise=MultichannelWave(scaled_noise, fs),
        metadata=scene,
    )


def _linear_array(center, azimuth, num_mics):
    axis = np.array([np.cos(azimuth), np.sin(azimuth), 0.0])
    offsets = (np.arange(num_mics) - (num_mics - 1) / 2.0) * MIC_SPACING
    return center[None, :] + offsets[:, None] * axis[None, :]


def sample_scene(seed, num_sources=3, num_mics=3, sample_rate=8000, noise_snr_db=20.0):
    """
    Draw a random scene from the simulation ranges.

    Rooms, reverberation times, SIRs and positions are uniform. A t60 below
    the Sabine minimum of the drawn room is raised to that minimum. The
    array and every source keep WALL_CLEARANCE from the walls and sources
    stay MIN_SOURCE_DISTANCE away from every microphone.
    """
    rng = np.random.default_rng(seed)
    width, depth = rng.uniform(*WIDTH_RANGE, size=2)
    height = rng.uniform(*HEIGHT_RANGE)
    t60 = rng.uniform(*T60_RANGE)
    bare = RoomSpec(width, depth, height, 0.0)
    t60 = min(max(t60, bare.minimum_t60()), T60_RANGE[1])
    room = RoomSpec(width, depth, height, t60)
    dims = room.dimensions

    half_span = (num_mics - 1) / 2.0 * MIC_SPACING
    low = np.array([WALL_CLEARANCE + half_span] * 2 + [WALL_CLEARANCE])
    high = dims - low
    center = rng.uniform(low, high)
    azimuth = rng.uniform(0.0, 2.0 * np.pi)
    mics = _linear_array(center, azimuth, num_mics)

    sources = []
    for _ in range(10000):
        candidate = rng.uniform(WALL_CLEARANCE, dims - WALL_CLEARANCE)
        if np.min(np.linalg.norm(mics - candidate, axis=1)) >= MIN_SOURCE_DISTANCE:
            sources.append(candidate)
            if len(sources) == num_sources:
                break
    else:
        raise GeometryError(f"could not place {num_sources} sources in room {dims.round(2).tolist()}")

    sir_db = tuple(rng.uniform(*SIR_RANGE, size=num_sources - 1))
    return Scene(room=room, source_positions=np.array(sources), mic_positions=mics, sir_db=sir_db,
                 noise_snr_db=noise_snr_db, seed=int(seed), sample_rate=sample_rate)


def synth_speech_like(seed, duration, fs=8000):
    """
    Speech-like test signal: syllables of formant-filtered harmonic bursts
    with a gliding pitch, unvoiced filtered-noise syllables and short pauses,
    normalized to unit RMS.

    Args:
        seed: integer seed
        duration: seconds, > 0
        fs: sample rate in Hz

    Returns:
        MultichannelWave: mono
    """
    if duration <= 0:
        raise ConfigError(f"duration must be positive, got {duration}")
    rng = np.random.default_rng(seed)
    length = max(int(round(duration * fs)), 1)
    signal = np.zeros(length)
    base_f0 = rng.uniform(80.0, 260.0)
    nyquist = fs / 2.0

    start = int(rng.uniform(0.0, 0.1) * fs) if length > fs // 5 else 0
    while start < length:
        size = min(int(rng.uniform(0.12, 0.3) * fs), length - start)
        size = max(size, 1)
        t = np.arange(size) / fs
        envelope = np.hanning(size + 2)[1:-1]
        if rng.random() < 0.8:
            f0 = base_f0 * rng.uniform(0.85, 1.15) * (1.0 + rng.uniform(-0.2, 0.2) * t / max(t[-1], 1e-3))
            phase = 2.0 * np.pi * np.cumsum(f0) / fs + rng.uniform(0.0, 2.0 * np.pi)
            harmonics = np.arange(1, int(0.9 * nyquist / f0.max()) + 1)
            burst = np.sum(np.sin(harmonics[:, None] * phase[None, :]) / harmonics[:, None], axis=0)
            voiced = np.zeros(size)
            for low, high in ((300.0, 900.0), (900.0, 2500.0)):
                center = rng.uniform(low, high)
                band = (center * 0.8 / nyquist, min(center * 1.2 / nyquist, 0.99))
                voiced += sosfilt(butter(2, band, btype='bandpass', output='sos'), burst)
            segment = voiced + 0.05 * rng.standard_normal(size)
        else:
            cutoff = rng.uniform(1500.0, 0.8 * nyquist) / nyquist
            segment = sosfilt(butter(4, cutoff, btype='highpass', output='sos'), rng.standard_normal(size))
        signal[start:start + size] += envelope * segment * rng.uniform(0.5, 1.0)
        start += size + int(rng.uniform(0.02, 0.15) * fs)

    rms = np.sqrt(np.mean(signal ** 2))
    if rms == 0:
        signal = rng.standard_normal(length)
        rms = np.sqrt(np.mean(signal ** 2))
    return MultichannelWave(signal / rms, fs)
