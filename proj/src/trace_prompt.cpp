#include "pioner/tracebench.hpp"

namespace pioner {

// Verbatim rewrite prompt; <INPUT CAPTION> is replaced by the sentence.
const std::string& trace_rewrite_prompt_template() {
    static const std::string text = R"PROMPT(I have image descriptions derived from spoken narratives. These need to be rewritten as concise, stand-alone captions in the style of the image-caption datasets. Follow these rules:

- Remove unnecessary narrative phrases like "we can see," "there is," "in this image," etc.  
- Ensure the caption is standalone and descriptive.  
- Use simple, objective language that highlights key elements.  
- Keep it concise—just a single phrase.  
- Follow the classical style of caption datasets.  
- If the description is vague, subjective, or does not describe a concrete visual element (e.g., "The image is taken indoor," "This image is blurred"), return `<INVALID>`.  
- Wrap the output in `{}` and add nothing else.

### **Examples:**  
- **Input:** "We can see a young elephant stands which is near the water in a wooded area."  
  **Output:** {A young elephant stands near the water in a wooded area.}  

- **Input:** "In this image I can see some young children kicking a soccer ball in a field."  
  **Output:** {A group of young children kicking a soccer ball around a field.}  

- **Input:** "In the left of the image, we see a pole that has two green street signs on it."  
  **Output:** {A pole has two green street signs on it.}  

- **Input:** "We can see two surfboards which are stuck in the sand along the seashore."  
  **Output:** {Two surfboards stuck in the sand along the seashore.}  

- **Input:** "This image consists of a man which rides a wakeboard behind a boat."  
  **Output:** {A man rides a wakeboard behind a boat.}  

- **Input:** "In the background, there are a bunch of sticky notes and a pair of scissors."  
  **Output:** {A bunch of sticky notes and a pair of scissors.}  

- **Input:** "It looks like a sepia-toned photograph of a motorcycle underneath the shadow of a
tree."  
  **Output:** {A sepia-toned photograph of a motorcycle underneath the shadow of a tree.}  
  
- **Input:** "There is a sky"  
  **Output:** {A sky.}  

- **Input:** "She is smiling."  
  **Output:** {A smiling girl.}  

- **Input:** "The image is taken indoor."  
  **Output:** {<INVALID>}  

- **Input:** "This image is edited."  
  **Output:** {<INVALID>}  

- **Input:** "The image is blurred."  
  **Output:** {<INVALID>}  

- **Input:** "I think he is about to jump."  
  **Output:** {<INVALID>}  

Now, rewrite the following captions accordingly. Wrap each in `{}` and add nothing else:  
<INPUT CAPTION>)PROMPT";
    return text;
}

} // namespace pioner
