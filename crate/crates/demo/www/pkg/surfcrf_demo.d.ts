/* tslint:disable */
/* eslint-disable */

/**
 * Cube-sphere vertices (xyz interleaved), quads, the face of each quad and
 * the eight degree-3 corner vertices.
 */
export class SphereGeometry {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    readonly corners: Uint32Array;
    readonly faces: Uint32Array;
    readonly positions: Float64Array;
    readonly quad_count: number;
    readonly quads: Uint32Array;
    readonly vertex_count: number;
}

/**
 * Label maps of the terrain demo, row-major `width × height`.
 */
export class TerrainResult {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    baseline_mae: number;
    crf_mae: number;
    readonly baseline: Uint32Array;
    readonly crf: Uint32Array;
    readonly truth: Uint32Array;
}

/**
 * `μ(d)` for label distances `0..z`.
 */
export function compatibility_curve(theta_comp: number, z: number): Float64Array;

/**
 * Kernel weight along one grid axis for offsets `0..=radius`, at feature
 * distance `feature_distance`.
 */
export function kernel_curve(w1: number, theta1: number, theta2: number, theta3: number, feature_distance: number, radius: number): Float64Array;

export function quad_sphere(level: number): SphereGeometry;

export function terrain_denoise(width: number, height: number, z: number, noise: number, outliers: number, w_p: number, theta_comp: number, iterations: number, seed: bigint): TerrainResult;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_get_terrainresult_baseline_mae: (a: number) => number;
    readonly __wbg_get_terrainresult_crf_mae: (a: number) => number;
    readonly __wbg_set_terrainresult_baseline_mae: (a: number, b: number) => void;
    readonly __wbg_set_terrainresult_crf_mae: (a: number, b: number) => void;
    readonly __wbg_spheregeometry_free: (a: number, b: number) => void;
    readonly __wbg_terrainresult_free: (a: number, b: number) => void;
    readonly compatibility_curve: (a: number, b: number) => [number, number];
    readonly kernel_curve: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
    readonly quad_sphere: (a: number) => [number, number, number];
    readonly spheregeometry_corners: (a: number) => [number, number];
    readonly spheregeometry_faces: (a: number) => [number, number];
    readonly spheregeometry_positions: (a: number) => [number, number];
    readonly spheregeometry_quad_count: (a: number) => number;
    readonly spheregeometry_quads: (a: number) => [number, number];
    readonly spheregeometry_vertex_count: (a: number) => number;
    readonly terrain_denoise: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: bigint) => [number, number, number];
    readonly terrainresult_baseline: (a: number) => [number, number];
    readonly terrainresult_crf: (a: number) => [number, number];
    readonly terrainresult_truth: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
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
