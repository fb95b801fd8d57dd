/** three.js rendering of the mirrored scene.
 *
 * Each (chunk, structure) pair is one BufferGeometry mesh; applying a
 * server patch disposes and rebuilds only the affected chunk's meshes.
 * The default camera is a posterior view of a prone patient (surgeon's
 * perspective): looking along -Y with +Z (cranial) up.
 */

import * as THREE from "three";
import { ClientSceneState } from "./scene.js";

export class SceneRenderer {
  readonly renderer: THREE.WebGLRenderer;
  readonly scene = new THREE.Scene();
  readonly camera: THREE.PerspectiveCamera;
  private readonly groups = new Map<string, THREE.Group>();
  private readonly materials = new Map<number, THREE.MeshLambertMaterial>();

  constructor(private readonly state: ClientSceneState,
              canvas: HTMLCanvasElement) {
    this.renderer = new THREE.WebGLRenderer({ canvas, antialias: true });
    this.camera = new THREE.PerspectiveCamera(
      45, canvas.clientWidth / Math.max(1, canvas.clientHeight), 0.1, 2000);
    this.scene.background = new THREE.Color(0x10141a);
    this.scene.add(new THREE.AmbientLight(0xffffff, 0.55));
    const key = new THREE.DirectionalLight(0xffffff, 0.9);
    key.position.set(0.4, -1, 0.6);
    this.scene.add(key);
  }

  /** Posterior approach on a prone patient: camera behind the back. */
  frame(center: THREE.Vector3, radius: number): void {
    this.camera.position.set(center.x, center.y - 2.6 * radius, center.z);
    this.camera.up.set(0, 0, 1);
    this.camera.lookAt(center);
    this.camera.updateProjectionMatrix();
  }

  frameToContent(): void {
    const box = new THREE.Box3();
    let any = false;
    for (const chunk of this.state.chunks.values()) {
      for (const m of chunk.structures.values()) {
        for (let i = 0; i + 2 < m.positions.length; i += 3) {
          box.expandByPoint(new THREE.Vector3(
            m.positions[i] as number,
            m.positions[i + 1] as number,
            m.positions[i + 2] as number));
          any = true;
        }
      }
    }
    if (!any) return;
    const center = box.getCenter(new THREE.Vector3());
    const radius = box.getSize(new THREE.Vector3()).length() / 2;
    this.frame(center, Math.max(radius, 1));
  }

  private materialFor(structure: number,
                      color: [number, number, number, number]):
      THREE.MeshLambertMaterial {
    let mat = this.materials.get(structure);
    if (!mat) {
      mat = new THREE.MeshLambertMaterial({
        color: new THREE.Color(color[0], color[1], color[2]),
        transparent: color[3] < 1,
        opacity: color[3],
      });
      this.materials.set(structure, mat);
    }
    return mat;
  }

  /** Rebuild the three.js objects for chunks the mirror marked dirty. */
  sync(): void {
    for (const id of this.state.dirty) {
      const old = this.groups.get(id);
      if (old) {
        this.scene.remove(old);
        old.traverse((obj) => {
          if (obj instanceof THREE.Mesh) obj.geometry.dispose();
        });
        this.groups.delete(id);
      }
      const chunk = this.state.chunks.get(id);
      if (!chunk) continue;
      const group = new THREE.Group();
      for (const m of chunk.structures.values()) {
        if (m.indices.length === 0) continue;
        const geom = new THREE.BufferGeometry();
        geom.setAttribute("position",
          new THREE.BufferAttribute(m.positions, 3));
        geom.setIndex(new THREE.BufferAttribute(m.indices, 1));
        geom.computeVertexNormals();
        const mesh = new THREE.Mesh(geom, this.materialFor(m.structure, m.color));
        mesh.visible = this.state.isVisible(m.structure);
        mesh.userData.structure = m.structure;
        group.add(mesh);
      }
      this.groups.set(id, group);
      this.scene.add(group);
    }
    this.state.dirty.clear();
    this.applyVisibility();
  }

  applyVisibility(): void {
    for (const group of this.groups.values()) {
      for (const obj of group.children) {
        if (obj instanceof THREE.Mesh) {
          obj.visible = this.state.isVisible(obj.userData.structure as number);
        }
      }
    }
  }

  render(): void {
    this.renderer.render(this.scene, this.camera);
  }
}
