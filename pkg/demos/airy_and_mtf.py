"""Diffraction-limited PSF of an aberration-free lens.

Traces a 129x129 pupil through the bundled ideal lens, builds the coherent
PSF and compares its radial profile and MTF against the closed-form Airy
results for the measured numerical aperture.

    python demos/airy_and_mtf.py
"""

from importlib import resources

import numpy as np

from cohlens import FieldSpec, read_prescription
from cohlens.imaging import diffraction_mtf, mtf_from_psf
from cohlens.psf import psf_three_channel
from cohlens.trace import sample_pupil, trace_system

system = read_prescription(resources.files("cohlens") / "data" / "ideal.lens").system
field = FieldSpec(0.0)

bundle = trace_system(system, sample_pupil(system, field, 129, wavelengths=[587.6]))
d = bundle.direction[bundle.valid]
na = float(np.hypot(d[:, 0], d[:, 1]).max())
lam = 587.6e-6  # mm
print(f"image-space NA {na:.4f}, working f-number {1 / (2 * na):.3f}")
print(f"analytic first dark ring {1.22 * lam / (2 * na) * 1e3:.3f} um")

psf = psf_three_channel(system, field, 129)
green = psf.intensity[1]
row = green[psf.size // 2]
print("\ncentral row of the green PSF (normalized to the peak):")
for j in range(psf.size // 2, psf.size // 2 + 8):
    r_um = (j - psf.size // 2) * psf.pitch * 1e3
    print(f"  r = {r_um:4.1f} um   {row[j] / row.max():.4f}")

cutoff = 2 * na / lam
sag, tan = mtf_from_psf(green, psf.pitch)
print("\nMTF vs the diffraction limit:")
print("  nu/cutoff   sagittal  tangential  analytic")
for f, ms, mt in zip(sag.frequency, sag.modulation, tan.modulation):
    if f > 0.8 * cutoff:
        break
    print(f"  {f / cutoff:9.3f}  {ms:9.4f}  {mt:10.4f}  {diffraction_mtf(f / cutoff):8.4f}")
