/* tslint:disable */
/* eslint-disable */

/**
 * Trains the aligner on `corpus` (one `source ||| target` pair per line) and
 * returns both directional alignments plus the symmetrized links of pair
 * `index`.
 */
export function align_pair(corpus: string, index: number, diagonal_tension: number, em_iterations: number): string;

/**
 * Tokens, intent, slots, BIO tags, skeleton and tree violations of one
 * seqlogical string.
 */
export function explore_seqlogical(text: string): string;

/**
 * Nearest pool neighbors of a code-switched seed and the filtered
 * candidates generated from them.
 */
export function match_preview(seed: string, k: number, beam: number): string;

/**
 * Example pool size, for the page header.
 */
export function pool_size(): number;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly align_pair: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly explore_seqlogical: (a: number, b: number) => [number, number, number, number];
    readonly match_preview: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly pool_size: () => number;
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
