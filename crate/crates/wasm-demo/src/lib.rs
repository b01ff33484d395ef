//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Images cross the boundary as RGBA bytes ready for `ImageData`.

use wasm_bindgen::prelude::*;

pub mod ops;

fn js_err(e: ops::DemoError) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen]
#[derive(Default)]
pub struct CharacterDemo {
    inner: ops::Demo,
}

#[wasm_bindgen]
impl CharacterDemo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> CharacterDemo {
        CharacterDemo::default()
    }

    pub fn identity_count() -> u32 {
        ops::IDENTITY_COUNT
    }

    pub fn view_count() -> u32 {
        ops::VIEW_COUNT
    }

    /// Ground-truth rendering of a character view.
    pub fn render(&self, identity: u32, view: u32, resolution: u32) -> Result<Vec<u8>, JsValue> {
        ops::render_rgba(identity, view, resolution).map_err(js_err)
    }

    pub fn caption(&self, identity: u32, view: u32) -> Result<String, JsValue> {
        ops::caption_for(identity, view).map_err(js_err)
    }

    /// The rendering mixed with seeded noise at flow time `t`.
    pub fn noised(&self, identity: u32, view: u32, resolution: u32, t: f32, seed: u64) -> Result<Vec<u8>, JsValue> {
        ops::noised_rgba(identity, view, resolution, t, seed).map_err(js_err)
    }

    /// Loads a `.icpt` checkpoint and returns a short summary.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<String, JsValue> {
        self.inner.load(bytes).map_err(js_err)
    }

    pub fn has_model(&self) -> bool {
        self.inner.has_model()
    }

    /// Samples an image of the reference character following `caption`.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        &self,
        identity: u32,
        view: u32,
        caption: &str,
        resolution: u32,
        steps: u32,
        scale: f32,
        seed: u64,
    ) -> Result<Vec<u8>, JsValue> {
        self.inner.generate(identity, view, caption, resolution, steps, scale, seed).map_err(js_err)
    }
}
