/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_get_terrainresult_baseline_mae: (a: number) => number;
export const __wbg_get_terrainresult_crf_mae: (a: number) => number;
export const __wbg_set_terrainresult_baseline_mae: (a: number, b: number) => void;
export const __wbg_set_terrainresult_crf_mae: (a: number, b: number) => void;
export const __wbg_spheregeometry_free: (a: number, b: number) => void;
export const __wbg_terrainresult_free: (a: number, b: number) => void;
export const compatibility_curve: (a: number, b: number) => [number, number];
export const kernel_curve: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
export const quad_sphere: (a: number) => [number, number, number];
export const spheregeometry_corners: (a: number) => [number, number];
export const spheregeometry_faces: (a: number) => [number, number];
export const spheregeometry_positions: (a: number) => [number, number];
export const spheregeometry_quad_count: (a: number) => number;
export const spheregeometry_quads: (a: number) => [number, number];
export const spheregeometry_vertex_count: (a: number) => number;
export const terrain_denoise: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: bigint) => [number, number, number];
export const terrainresult_baseline: (a: number) => [number, number];
export const terrainresult_crf: (a: number) => [number, number];
export const terrainresult_truth: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
