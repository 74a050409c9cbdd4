"""Physical constants in frequency units (CODATA 2018)."""

#: Bohr magneton over h, MHz/T
MU_B = 13996.24494

#: Boltzmann constant over h, MHz/K
K_B = 20836.61912

#: 51V nuclear magneton times nuclear g-factor over h, MHz/T
GN_MUN_V51 = 11.213

#: speed of light, m/s
C_LIGHT = 299_792_458.0


def nm_to_ghz(wavelength_nm):
    """Vacuum wavelength (nm) to optical frequency (GHz)."""
    return C_LIGHT / wavelength_nm


def ghz_to_nm(freq_ghz):
    return C_LIGHT / freq_ghz
