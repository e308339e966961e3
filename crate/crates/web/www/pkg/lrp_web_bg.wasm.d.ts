/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_scene_free: (a: number, b: number) => void;
export const scene_cascade: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const scene_default_focus: (a: number, b: number) => [number, number];
export const scene_depth: (a: number) => number;
export const scene_dim: (a: number) => number;
export const scene_erf: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const scene_new: (a: number, b: number, c: number, d: number) => [number, number, number];
export const scene_reachable: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const scene_voxels: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
