/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const mergeSketches: (a: number, b: number, c: number, d: number, e: number, f: bigint, g: number, h: number, i: bigint) => [number, number, number, number];
export const release: (a: number, b: number, c: number, d: bigint, e: number, f: number, g: number, h: number, i: bigint) => [number, number, number, number];
export const sweep: (a: number, b: number, c: number, d: bigint, e: number, f: number, g: bigint) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
