//! A scene is the primitive list plus the texture pool, kept index-aligned.

use crate::geometry::Primitive;
use crate::texture::TexturePool;

#[derive(Clone, Debug)]
pub struct Scene {
    pub prims: Vec<Primitive>,
    /// Entry i belongs to `prims[i]`; untextured entries have resolution (0, 0).
    pub textures: TexturePool,
}

impl Scene {
    pub fn new(prims: Vec<Primitive>, textures: TexturePool) -> Scene {
        assert_eq!(prims.len(), textures.len(), "texture pool must align with primitives");
        Scene { prims, textures }
    }

    pub fn untextured(prims: Vec<Primitive>) -> Scene {
        let textures = TexturePool::untextured(prims.len());
        Scene { prims, textures }
    }

    pub fn n_prims(&self) -> usize {
        self.prims.len()
    }

    pub fn total_texels(&self) -> usize {
        self.textures.total_texels()
    }
}
