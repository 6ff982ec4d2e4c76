/* tslint:disable */
/* eslint-disable */

export function mergeSketches(a: string, b: string, k: number, d: bigint, epsilon: number, delta: number, seed: bigint): string;

export function release(stream: string, k: number, d: bigint, epsilon: number, delta: number, mechanism: string, seed: bigint): string;

export function sweep(stream: string, k: number, d: bigint, delta: number, trials: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly mergeSketches: (a: number, b: number, c: number, d: number, e: number, f: bigint, g: number, h: number, i: bigint) => [number, number, number, number];
    readonly release: (a: number, b: number, c: number, d: bigint, e: number, f: number, g: number, h: number, i: bigint) => [number, number, number, number];
    readonly sweep: (a: number, b: number, c: number, d: bigint, e: number, f: number, g: bigint) => [number, number, number, number];
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
