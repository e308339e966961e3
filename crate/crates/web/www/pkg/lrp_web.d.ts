/* tslint:disable */
/* eslint-disable */

export class Scene {
    free(): void;
    [Symbol.dispose](): void;
    cascade(ladder: string, stage: number): Float64Array;
    /**
     * Occupied cell nearest the middle of the slab at depth `z`.
     */
    default_focus(z: number): Int32Array;
    erf(with_lrp: boolean, ladder: string, x: number, y: number, z: number): Float64Array;
    constructor(dim: number, depth: number, occupancy: number, seed: number);
    reachable(ladder: string, x: number, y: number, z: number): Uint8Array;
    readonly depth: number;
    readonly dim: number;
    readonly voxels: number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_scene_free: (a: number, b: number) => void;
    readonly scene_cascade: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly scene_default_focus: (a: number, b: number) => [number, number];
    readonly scene_depth: (a: number) => number;
    readonly scene_dim: (a: number) => number;
    readonly scene_erf: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly scene_new: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly scene_reachable: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly scene_voxels: (a: number) => number;
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
