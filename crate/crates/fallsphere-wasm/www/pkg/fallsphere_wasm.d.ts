/* tslint:disable */
/* eslint-disable */

/**
 * Branch of the planar Hopf normal form with frequency shift `a`, computed
 * by the engine used for the fluid problem; the exact branch is `μ = ε²`,
 * `ζ = 1 − aε²`.
 */
export function normal_form_branch(a: number, eps_max: number, n_eps: number): string;

/**
 * Resistance of a sphere oscillating at frequency `omega` in fluid at rest,
 * with `σ_min(B)` of the coupled rigid system.
 */
export function resistance(omega: number, l_max: number, n_r: number, r_out: number): string;

/**
 * Steady drag `|τ|` at a small Galilei number against the unbounded Stokes
 * value `λ/(6π)`.
 */
export function stokes_drag(lambda: number, l_max: number, n_r: number, r_out: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly normal_form_branch: (a: number, b: number, c: number) => [number, number, number, number];
    readonly resistance: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly stokes_drag: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
