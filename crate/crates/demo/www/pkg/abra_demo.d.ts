/* tslint:disable */
/* eslint-disable */

export function abraHistogram(seed: number, k_mu: number, k_sigma: number, bins: number): Float64Array;

export function arcfaceCurve(margin: number, scale: number, points: number): Float64Array;

export function platePreview(seed: number, tau: number, contrast: number, plate: number): Uint8Array;

export function plateShift(seed: number, tau: number, contrast: number, plate: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly abraHistogram: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly arcfaceCurve: (a: number, b: number, c: number) => [number, number, number, number];
    readonly platePreview: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly plateShift: (a: number, b: number, c: number, d: number) => [number, number, number, number];
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
