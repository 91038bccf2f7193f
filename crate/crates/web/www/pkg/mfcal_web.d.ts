/* tslint:disable */
/* eslint-disable */

/**
 * Simulates one of the built-in scenarios and calibrates it.
 *
 * `snapshots = 0` uses exact covariances; `snr_db` is ignored for the
 * noiseless desk scenario.
 */
export function calibrate(scenario: string, mode: string, snapshots: number, snr_db: number, seed: number): string;

/**
 * Frobenius distance between a sample covariance from `snapshots`
 * snapshots and the exact one, at the lowest frequency of the 3-frequency
 * scenario.
 */
export function covariance_error(snapshots: number, seed: number): number;

/**
 * Keeps the `s` largest-magnitude entries, lowest index first on ties.
 */
export function hard_threshold(values: Float64Array, s: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly calibrate: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly covariance_error: (a: number, b: number) => [number, number, number];
    readonly hard_threshold: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
