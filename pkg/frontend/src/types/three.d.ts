/** Minimal ambient declarations for the subset of three.js this client
 * uses (the three package ships without type declarations). */

declare module "three" {
  export class Vector2 {
    constructor(x?: number, y?: number);
    x: number;
    y: number;
  }

  export class Vector3 {
    constructor(x?: number, y?: number, z?: number);
    x: number;
    y: number;
    z: number;
    set(x: number, y: number, z: number): this;
    length(): number;
  }

  export class Box3 {
    expandByPoint(point: Vector3): this;
    getCenter(target: Vector3): Vector3;
    getSize(target: Vector3): Vector3;
  }

  export class Color {
    constructor(colorOrR?: number, g?: number, b?: number);
  }

  export class Ray {
    at(t: number, target: Vector3): Vector3;
  }

  export class Raycaster {
    ray: Ray;
    setFromCamera(coords: Vector2, camera: Camera): void;
  }

  export class Object3D {
    position: Vector3;
    up: Vector3;
    visible: boolean;
    userData: Record<string, unknown>;
    children: Object3D[];
    add(...objects: Object3D[]): this;
    remove(...objects: Object3D[]): this;
    lookAt(target: Vector3): void;
    traverse(callback: (object: Object3D) => void): void;
  }

  export class Camera extends Object3D {}

  export class PerspectiveCamera extends Camera {
    constructor(fov?: number, aspect?: number, near?: number, far?: number);
    updateProjectionMatrix(): void;
  }

  export class Group extends Object3D {}

  export class Scene extends Object3D {
    background: Color | null;
  }

  export class AmbientLight extends Object3D {
    constructor(color?: number, intensity?: number);
  }

  export class DirectionalLight extends Object3D {
    constructor(color?: number, intensity?: number);
  }

  export class BufferAttribute {
    constructor(array: ArrayLike<number>, itemSize: number);
  }

  export class BufferGeometry {
    setAttribute(name: string, attribute: BufferAttribute): this;
    setIndex(index: BufferAttribute): this;
    computeVertexNormals(): void;
    dispose(): void;
  }

  export interface MeshLambertMaterialParameters {
    color?: Color | number;
    transparent?: boolean;
    opacity?: number;
  }

  export class MeshLambertMaterial {
    constructor(parameters?: MeshLambertMaterialParameters);
  }

  export class Mesh extends Object3D {
    constructor(geometry: BufferGeometry, material: MeshLambertMaterial);
    geometry: BufferGeometry;
  }

  export interface WebGLRendererParameters {
    canvas?: HTMLCanvasElement;
    antialias?: boolean;
  }

  export class WebGLRenderer {
    constructor(parameters?: WebGLRendererParameters);
    render(scene: Scene, camera: Camera): void;
  }
}
