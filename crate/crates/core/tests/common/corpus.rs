//! Malformed positive responses: ten manglings of five base responses.

pub const BASES: [(&str, &str, &str); 5] = [
    ("A kitchen with a table.", "The table holds cereal and juice.", "(B)"),
    ("Two dogs on grass.", "Both animals have four legs.\nOne is larger.", "(A) dog"),
    ("A red sign.", "Stop signs are red and octagonal.", "The correct choice is (C) stop."),
    ("A map of Europe.", "The highlighted country is inland.", "(D)"),
    ("A beaker with blue liquid.", "Copper sulfate is blue in solution.", "(A) copper sulfate"),
];

/// The first five keep every section and only change marker spelling or
/// order; the rest drop, empty, repeat or pad sections.
pub fn malformations(c: &str, r: &str, k: &str) -> Vec<String> {
    vec![
        format!("###caption: {c}\n###reasoning: {r}\n###conclusion: {k}"),
        format!("**Caption:** {c}\n**Reasoning:** {r}\n**Conclusion:** {k}"),
        format!("## CAPTION: {c}\n## REASONING: {r}\n## CONCLUSION: {k}"),
        format!("Caption: {c}\nReasoning: {r}\nConclusion: {k}"),
        format!("###REASONING: {r}\n###CAPTION: {c}\n###CONCLUSION: {k}"),
        format!("###CAPTION: {c}\n###REASONING: {r}"),
        format!("###CAPTION: {c}\n###REASONING:\n###CONCLUSION: {k}"),
        format!("###CAPTION: {c}\n###REASONING: {r}\n###CONCLUSION: {k}\n###CONCLUSION: {k}"),
        format!("Sure! Here it is.\n###CAPTION: {c}\n###REASONING: {r}\n###CONCLUSION: {k}"),
        format!("###CAPTION:{c}\n\n\n###REASONING:   {r}   \n###CONCLUSION:\t{k}\n"),
    ]
}

pub fn corpus() -> Vec<String> {
    BASES.iter().flat_map(|(c, r, k)| malformations(c, r, k)).collect()
}
