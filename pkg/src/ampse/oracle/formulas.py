"""Built-in closed-form metric functions.

Every function takes module-local parameter and interface-input mappings,
the testbench config mapping and a ``Parasitics`` record, and returns
``(metrics, interface_out)``. Values may be floats, arrays or ``ad.Dual``.

Units: fF, kΩ, ps (kΩ·fF = ps), GS/s, mW, mA, V.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .. import ad


@dataclass(frozen=True)
class Parasitics:
    """Layout-stage knobs; all zero means the schematic (identity) transform."""

    cap_scale: float = 0.0
    res_scale: float = 0.0
    cap_offset: float = 0.0

    def cap(self, c):
        return (1.0 + self.cap_scale) * c + self.cap_offset

    def cap_delay(self, t):
        return (1.0 + self.cap_scale) * t

    def res(self, r):
        return (1.0 + self.res_scale) * r


NONE = Parasitics()


@dataclass(frozen=True)
class ModuleFormula:
    fn: Callable
    params: tuple[str, ...]
    interface_in: tuple[str, ...]
    interface_out: tuple[str, ...]
    metrics: tuple[str, ...]
    # interface inputs may be any declared names (summed or ignored by fn)
    free_inputs: bool = False


@dataclass(frozen=True)
class Reducer:
    fn: Callable
    outputs: tuple[str, ...]


# --- sar6 -------------------------------------------------------------------

def _sar6_th(p, x, cfg, par=NONE):
    n = cfg["n"]
    c_dac = 2.0 ** n * p["c_u"]
    c_samp = par.cap(c_dac + x["C_cmp"])
    r_total = x["R_drv"] + par.res(0.5 / p["w_sw"])
    tau = r_total * c_samp
    t_settle = 0.693 * (n + 1) * tau
    v_ktc = ad.sqrt(4.14e-6 / c_samp)
    metrics = {"C_dac": c_dac, "C_samp": c_samp, "tau": tau, "t_settle": t_settle, "v_ktc": v_ktc}
    return metrics, {}


def _sar6_cmp(p, x, cfg, par=NONE):
    w_in, i_tail = p["w_in"], p["i_tail"]
    t_cmp = par.cap_delay(25.0 / ad.sqrt(w_in * i_tail))
    v_cmp = 5e-4 / ad.sqrt(w_in)
    c_cmp = par.cap(0.25 * w_in)
    p_cmp = 0.05 * cfg["n"] * i_tail * cfg["f_s"]
    return {"t_cmp": t_cmp, "v_cmp": v_cmp, "P_cmp": p_cmp}, {"C_cmp": c_cmp}


def _sar6_logic(p, x, cfg, par=NONE):
    d = p["d"]
    t_logic = par.cap_delay(8.0 / d)
    p_logic = 0.01 * cfg["n"] * d * cfg["f_s"]
    return {"t_logic": t_logic, "P_logic": p_logic}, {}


def _sar6_drv(p, x, cfg, par=NONE):
    w = p["w_drv"]
    return {"P_drv": 0.02 * w * cfg["f_s"]}, {"R_drv": par.res(1.0 / w)}


def _sar6_reduce(v, p, cfg):
    n, v_fs = cfg["n"], cfg["V_FS"]
    total = v["trackhold_dac.t_settle"] + n * (v["comparator.t_cmp"] + v["sar_logic.t_logic"])
    f_s_max = 1000.0 / total
    v_noise = ad.sqrt(v["trackhold_dac.v_ktc"] ** 2 + v["comparator.v_cmp"] ** 2)
    lsb = v_fs / 2.0 ** n
    sndr = 10.0 * ad.log10((v_fs * v_fs / 8.0) / (v_noise ** 2 + lsb * lsb / 12.0))
    enob = (sndr - 1.76) / 6.02
    p_total = v["driver.P_drv"] + v["comparator.P_cmp"] + v["sar_logic.P_logic"]
    area = 2.0 ** n * p["trackhold_dac.c_u"] + p["comparator.w_in"] + 2.0 * p["driver.w_drv"] + p["sar_logic.d"]
    return {"ENOB": enob, "f_s_max": f_s_max, "P_total": p_total, "v_noise_total": v_noise, "area_proxy": area}


# --- toys used by the test-suite and docs -----------------------------------

def _toy_quadratic(p, x, cfg, par=NONE):
    centre = cfg.get("centre", 3.0)
    return {"obj": (p["p"] - centre) ** 2}, {}


def _toy_affine(p, x, cfg, par=NONE):
    y = 2.0 * p["x"] + 1.0
    for k in sorted(x):
        y = y + x[k]
    return {"y": y}, {"out": par.res(y)}


def _toy_quadratic_reduce(v, p, cfg):
    return {"obj": v["toy.obj"]}


def _sum_reduce(v, p, cfg):
    total = 0.0
    for k in sorted(v):
        if k.endswith(".y"):
            total = total + v[k]
    return {"total": total}


FORMULAS: dict[str, ModuleFormula] = {
    "sar6_th": ModuleFormula(_sar6_th, ("c_u", "w_sw"), ("R_drv", "C_cmp"), (),
                             ("C_dac", "C_samp", "tau", "t_settle", "v_ktc")),
    "sar6_cmp": ModuleFormula(_sar6_cmp, ("w_in", "i_tail"), (), ("C_cmp",), ("t_cmp", "v_cmp", "P_cmp")),
    "sar6_logic": ModuleFormula(_sar6_logic, ("d",), (), (), ("t_logic", "P_logic")),
    "sar6_drv": ModuleFormula(_sar6_drv, ("w_drv",), (), ("R_drv",), ("P_drv",)),
    "toy_quadratic": ModuleFormula(_toy_quadratic, ("p",), (), (), ("obj",)),
    "toy_affine": ModuleFormula(_toy_affine, ("x",), (), ("out",), ("y",), free_inputs=True),
}

REDUCERS: dict[str, Reducer] = {
    "sar6": Reducer(_sar6_reduce, ("ENOB", "f_s_max", "P_total", "v_noise_total", "area_proxy")),
    "toy_quadratic": Reducer(_toy_quadratic_reduce, ("obj",)),
    "sum": Reducer(_sum_reduce, ("total",)),
}
