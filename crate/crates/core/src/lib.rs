pub mod encoding;
pub mod extraction;
pub mod gbm;
pub mod io;
pub mod linear;
pub mod questionnaire;
pub mod shap;
pub mod stats;
pub mod synth;
pub mod textfeat;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/questionnaire.md")]
    mod questionnaire {}
    #[doc = include_str!("../../../book/src/extraction.md")]
    mod extraction {}
    #[doc = include_str!("../../../book/src/encoding.md")]
    mod encoding {}
    #[doc = include_str!("../../../book/src/disparities.md")]
    mod disparities {}
    #[doc = include_str!("../../../book/src/decomposition.md")]
    mod decomposition {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/text.md")]
    mod text {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
