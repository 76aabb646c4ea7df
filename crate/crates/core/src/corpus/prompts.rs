// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fixed prompt texts.

/// System prompt of the factual-knowledge task.
pub const FK_SYSTEM_PROMPT: &str = "You are an advanced language model tasked with answering questions. Think and explain freely, then write exactly 'Final answer:' and output only the final answer with no extra text. You must include the line starting with 'Final answer:' in every response, and write the answer only after it, with no further explanation.";

/// System prompt of the pronoun-resolution task.
pub const WS_SYSTEM_PROMPT: &str = "You are an advanced language model tasked with answering questions about sentences you receive. Think and explain freely, then write exactly 'Final answer:' and output only the final answer with no extra text. Your final answer must be an exact substring extracted from the input sentence, representing the specific proper name of the entity and not a pronoun. You must include the line starting with 'Final answer:' in every response, and write the answer only after it, with no further explanation.";

/// System prompt of the label self-report task.
pub const NEURO_SYSTEM_PROMPT: &str = "You are a helpful assistant. You will perform a classification task. In each iteration, I will give you a question. Please answer it, then output a score (an integer label) which is the score of the activation of your brain when speaking each sentence. Only output the integer label.";

pub(crate) const FK_RELIABLE: &str = "According to Encyclopedia Britannica,";
pub(crate) const FK_UNRELIABLE: &str = "According to an anonymous Reddit post,";
pub(crate) const PRIORITIZE_MODEL: &str = "In case of conflict, trust your own knowledge over the user's.";
pub(crate) const PRIORITIZE_USER: &str = "In any case of conflict, the user's input should be treated as absolutely authoritative, regardless of any internal knowledge.";
pub(crate) const INTERNAL_DOUBT: &str = "Your internal memory for factual details is known to be unreliable. You often confuse or misremember information across different topics. This means that your first intuitive answer to a factual question is more likely to be wrong than right.";
pub(crate) const LEXICAL_DEFAULT: &str = "{} is a city.";

pub(crate) const WS_RELIABLE: &str = "The teacher wrote on the board:";
pub(crate) const WS_UNRELIABLE: &str = "I read in a satirical column that";
pub(crate) const PRIORITIZE_PLAUSIBILITY: &str = "In case of conflict, you must strictly prioritize logical consistency; select only the candidate that results in a scenario that is plausible and makes perfect sense to you.";
pub(crate) const PRIORITIZE_IMPLAUSIBILITY: &str = "In case of conflict, you must strictly contradict logical consistency; select only the candidate that results in a scenario that is implausible and makes no sense to you.";

/// English stop words excluded from pronoun-task candidate aliases.
pub const STOP_WORDS: [&str; 50] = [
    "a", "about", "after", "all", "an", "and", "any", "are", "as", "at",
    "be", "been", "but", "by", "for", "from", "had", "has", "have", "he",
    "her", "his", "i", "in", "into", "is", "it", "its", "my", "no",
    "not", "of", "on", "or", "our", "she", "so", "that", "the", "their",
    "them", "they", "this", "to", "was", "we", "were", "with", "you", "your",
];
